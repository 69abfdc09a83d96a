"""Compare the compiled and numpy convolution lowering kernels.

Times im2col, col2im and a full conv forward/backward pass on each backend
and checks that both produce the same bytes.

    python3 benchmarks/bench_kernels.py [--repeats 20] [--json out.json]
"""

import argparse
import json
import timeit

import numpy as np

from semprop import _kernels_py

try:
    from semprop import _kernels as _kernels_c
except ImportError:  # extension not built
    _kernels_c = None

CASES = [
    # (batch, channels, size, kernel, pad, dilation, stride)
    (1, 16, 32, 3, 1, 1, 1),
    (4, 32, 16, 3, 2, 2, 1),
    (2, 8, 64, 3, 1, 1, 2),
    (4, 64, 8, 3, 12, 12, 1),
]


def _out(size, k, pad, dil, stride):
    return (size + 2 * pad - dil * (k - 1) - 1) // stride + 1


def conv_pass(mod, x, w, pad, dil, stride):
    """One conv forward and backward using per-sample GEMMs."""
    n, c, hgt, wid = x.shape
    co, _, k, _ = w.shape
    wm = w.reshape(co, -1)
    cols = mod.im2col(x, k, k, pad, dil, stride)
    y = np.stack([wm @ cols[i] for i in range(n)])
    gy = np.ones_like(y)
    gw = sum(gy[i] @ cols[i].T for i in range(n))
    gcols = np.ascontiguousarray(np.stack([wm.T @ gy[i] for i in range(n)]))
    gx = mod.col2im(gcols, c, hgt, wid, k, k, pad, dil, stride)
    return y, gw, gx


def bench_case(case, repeats, rng):
    n, c, size, k, pad, dil, stride = case
    x = rng.standard_normal((n, c, size, size))
    w = rng.standard_normal((16, c, k, k))
    oh = _out(size, k, pad, dil, stride)
    cols = rng.standard_normal((n, c * k * k, oh * oh))
    row = {"case": dict(zip(["batch", "channels", "size", "kernel", "pad", "dilation", "stride"], case))}
    outs = {}
    for name, mod in (("python", _kernels_py), ("cython", _kernels_c)):
        if mod is None:
            continue
        t_i = min(timeit.repeat(lambda: mod.im2col(x, k, k, pad, dil, stride), number=1, repeat=repeats))
        t_c = min(timeit.repeat(lambda: mod.col2im(cols, c, size, size, k, k, pad, dil, stride),
                                number=1, repeat=repeats))
        t_f = min(timeit.repeat(lambda: conv_pass(mod, x, w, pad, dil, stride), number=1, repeat=repeats))
        row[name] = {"im2col_ms": 1e3 * t_i, "col2im_ms": 1e3 * t_c, "conv_fwd_bwd_ms": 1e3 * t_f}
        outs[name] = conv_pass(mod, x, w, pad, dil, stride)
    if len(outs) == 2:
        row["bit_identical"] = all(np.array_equal(a, b) for a, b in zip(outs["python"], outs["cython"]))
        row["speedup"] = {key: row["python"][key] / row["cython"][key] for key in row["python"]}
    return row


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args(argv)
    if _kernels_c is None:
        print("compiled extension not built; timing the numpy backend only")
    rng = np.random.default_rng(args.seed)
    rows = [bench_case(case, args.repeats, rng) for case in CASES]
    for r in rows:
        cs = r["case"]
        print(f"N={cs['batch']} C={cs['channels']} {cs['size']}x{cs['size']} k={cs['kernel']} "
              f"pad={cs['pad']} dil={cs['dilation']} stride={cs['stride']}")
        for name in ("python", "cython"):
            if name in r:
                t = r[name]
                print(f"  {name:7s} im2col {t['im2col_ms']:8.3f} ms  col2im {t['col2im_ms']:8.3f} ms  "
                      f"conv f+b {t['conv_fwd_bwd_ms']:8.3f} ms")
        if "speedup" in r:
            s = r["speedup"]
            print(f"  speedup im2col x{s['im2col_ms']:.2f}  col2im x{s['col2im_ms']:.2f}  "
                  f"conv x{s['conv_fwd_bwd_ms']:.2f}  identical={r['bit_identical']}")
    if args.json:
        with open(args.json, "w") as f:
            json.dump(rows, f, indent=2)
    return rows


if __name__ == "__main__":
    main()

"""Central finite-difference checks for every differentiable op.

Each check builds a scalar from the op (a random projection of its output
for tensor-valued ops), differentiates it on the tape, and compares against
``(f(x + eps) - f(x - eps)) / (2 eps)`` in double precision. The error is
norm-wise: ``|analytic - numeric| / max(|analytic|, |numeric|)``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

from . import tensor as T
from .dynamic import build_supervision, dsspn_loss, forward_plan, plan_activation
from .hierarchy import load_hierarchy
from .model import ModelConfig, build_model

EPS = 1e-5
RTOL = 1e-4


@dataclass
class CheckResult:
    name: str
    rel_error: float
    passed: bool

    def to_dict(self):
        return {"name": self.name, "rel_error": self.rel_error, "passed": self.passed}


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if den == 0 else float(np.linalg.norm(a - b) / den)


def numeric_grad(f: Callable[[], float], array: np.ndarray, eps: float = EPS,
                 coords: Optional[np.ndarray] = None) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``array`` (perturbed in place).

    With ``coords`` only those flat positions are probed; the result then has
    one entry per coordinate.
    """
    flat = array.reshape(-1)
    idx = np.arange(flat.size) if coords is None else coords
    out = np.empty(len(idx))
    for k, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        out[k] = (hi - lo) / (2 * eps)
    return out if coords is not None else out.reshape(array.shape)


def _check(name, build, leaves: Dict[str, T.Tensor], rng, max_coords=None) -> List[CheckResult]:
    def value():
        return float(build().data)

    with T.Tape() as tape:
        loss = build()
        grads = tape.backward(loss)
    results = []
    for label, leaf in leaves.items():
        analytic = grads.get(leaf, np.zeros_like(leaf.data))
        coords = None
        if max_coords is not None and leaf.data.size > max_coords:
            coords = np.sort(rng.choice(leaf.data.size, max_coords, replace=False))
        numeric = numeric_grad(value, leaf.data, coords=coords)
        a = analytic.reshape(-1)[coords] if coords is not None else analytic
        err = rel_error(a, numeric)
        results.append(CheckResult(f"{name}:{label}", err, err < RTOL))
    return results


def _leaf(rng, *shape, away_from_zero=False):
    x = rng.standard_normal(shape)
    if away_from_zero:
        x = np.where(np.abs(x) < 0.05, np.sign(x + 1e-12) * 0.05 + x, x)
    return T.Tensor(x, requires_grad=True)


def op_checks(seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    out: List[CheckResult] = []

    def project(t, r):
        return T.sum_all(_mul(t, r))

    for pad, dil, stride, k in [(1, 1, 1, 3), (2, 2, 1, 3), (1, 1, 2, 3), (0, 1, 1, 1), (3, 3, 1, 3)]:
        n, c, h, w, o = rng.integers(1, 3), rng.integers(1, 4), rng.integers(4, 7), rng.integers(4, 7), rng.integers(1, 4)
        x, wt, b = _leaf(rng, n, c, h, w), _leaf(rng, o, c, k, k), _leaf(rng, o)
        oh = (h + 2 * pad - dil * (k - 1) - 1) // stride + 1
        ow = (w + 2 * pad - dil * (k - 1) - 1) // stride + 1
        r = rng.standard_normal((n, o, oh, ow))
        out += _check(f"conv2d[k{k},p{pad},d{dil},s{stride}]",
                      lambda: project(T.conv2d(x, wt, b, pad, dil, stride), r),
                      {"x": x, "weight": wt, "bias": b}, rng)

    x = _leaf(rng, 2, 3, 4, 5, away_from_zero=True)
    r = rng.standard_normal(x.shape)
    out += _check("relu", lambda: project(T.relu(x), r), {"x": x}, rng)
    out += _check("sigmoid", lambda: project(T.sigmoid(x), r), {"x": x}, rng)
    out += _check("scale", lambda: project(T.scale(x, 0.7), r), {"x": x}, rng)

    a, b2 = _leaf(rng, 2, 3, 4, 4), _leaf(rng, 2, 5, 4, 4)
    r = rng.standard_normal((2, 8, 4, 4))
    out += _check("concat_channels", lambda: project(T.concat_channels([a, b2]), r), {"a": a, "b": b2}, rng)
    c1, c2, c3 = (_leaf(rng, 2, 3, 4, 4) for _ in range(3))
    r = rng.standard_normal((2, 3, 4, 4))
    out += _check("add", lambda: project(T.add([c1, c2, c3]), r), {"a": c1, "b": c2, "c": c3}, rng)
    rows = np.array([2, 0])
    s = _leaf(rng, 3, 2, 3, 3)
    r = rng.standard_normal((2, 2, 3, 3))
    out += _check("take_samples", lambda: project(T.take_samples(s, rows), r), {"x": s}, rng)

    f0, f1 = _leaf(rng, 3, 4, 3, 3), _leaf(rng, 2, 2, 3, 3)
    wt, b = _leaf(rng, 5, 6, 1, 1), _leaf(rng, 5)
    r = rng.standard_normal((2, 5, 3, 3))
    for retain in (False, True):
        out += _check(f"dense_conv1x1[retain={retain}]",
                      lambda: project(T.dense_conv1x1([f0, f1], wt, b, rows=[np.array([2, 1]), None],
                                                      retain_concat=retain), r),
                      {"f0": f0, "f1": f1, "weight": wt, "bias": b}, rng)

    z = _leaf(rng, 2, 3, 4, 4)
    t = (rng.random(z.shape) < 0.5).astype(float)
    m = rng.random(z.shape) < 0.7
    for red in ("mean", "sum"):
        out += _check(f"bce_with_logits[{red}]", lambda: T.bce_with_logits(z, t, m, red), {"logits": z}, rng)
    labels = rng.integers(-1, 3, size=(2, 4, 4))
    out += _check("softmax_ce", lambda: T.softmax_ce(z, labels), {"logits": z}, rng)
    labels_m = np.where(labels == 1, 2, labels)
    out += _check("softmax_ce[masked]",
                  lambda: T.softmax_ce(z, labels_m, np.array([True, False, True])), {"logits": z}, rng)
    return out


def _mul(t: T.Tensor, r: np.ndarray) -> T.Tensor:
    """Elementwise product with a constant (used only for projections)."""
    return T._emit(t.data * r, [t], lambda g: (g * r,))


TINY_TREE = {
    "concepts": [
        {"name": "root", "parent": None},
        {"name": "a", "parent": "root"}, {"name": "b", "parent": "root"},
        {"name": "a1", "parent": "a"}, {"name": "a2", "parent": "a"},
        {"name": "a11", "parent": "a1"}, {"name": "a12", "parent": "a1"},
        {"name": "b1", "parent": "b"}, {"name": "b2", "parent": "b"},
    ],
    "datasets": [{"name": "all", "labels": [
        {"label_id": i, "concept": c} for i, c in enumerate(["a11", "a12", "a2", "b1", "b2"])]}],
}


def model_checks(seed: int = 0, max_coords: int = 20) -> List[CheckResult]:
    """End-to-end loss gradients for every parameter tensor of a tiny model."""
    rng = np.random.default_rng(seed)
    h = load_hierarchy(TINY_TREE)
    binding = h.binding("all")
    results = []
    for head in ("bce", "softmax"):
        cfg = ModelConfig(m=3, m0=4, bottleneck=2, stem_channels=(3, 3, 3, 3, 3),
                          head_loss=head, dtype="float64")
        model = build_model(h, cfg, seed)
        for p in model.params().values():
            p.data = p.data + 0.05 * rng.standard_normal(p.data.shape)
        image = T.Tensor(rng.standard_normal((1, 3, 16, 16)), requires_grad=True)
        labels = rng.integers(0, 5, size=(2, 2))
        labels[0, 0] = -1
        present = {binding.label_to_concept[int(l)] for l in labels.reshape(-1) if l >= 0}
        plan = plan_activation(present, h, binding)
        target = build_supervision(labels, plan, h, binding)

        def build():
            outs = forward_plan(model, image, plan)
            return dsspn_loss(outs.logits, target, cfg)

        leaves = dict(model.params())
        leaves["image"] = image
        results += _check(f"dsspn_loss[{head}]", build, leaves, rng, max_coords)
    return results


def run_all(seed: int = 0) -> dict:
    start = time.perf_counter()
    results = op_checks(seed) + model_checks(seed)
    return {
        "passed": all(r.passed for r in results),
        "tolerance": RTOL,
        "eps": EPS,
        "seconds": time.perf_counter() - start,
        "checks": [r.to_dict() for r in results],
    }

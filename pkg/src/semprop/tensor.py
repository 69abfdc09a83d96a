"""Dense 4-D tensors with a reverse-mode tape.

Every kernel here runs with a fixed summation order: convolutions loop over
the batch and issue one GEMM per sample, so the value computed for a sample
does not depend on which other samples share its batch. This is what lets
the batched scheduler reproduce per-sample execution bit for bit.
"""

from __future__ import annotations

import threading
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy.special import expit

from . import kernels


class ShapeError(ValueError):
    """Raised when operand extents disagree; the message names the dimension."""


class TapeError(RuntimeError):
    pass


class Tensor:
    """A numpy array plus the flag saying whether gradients flow into it."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


def tensor(data, dtype=np.float32, requires_grad=False, name=None) -> Tensor:
    return Tensor(np.ascontiguousarray(np.asarray(data, dtype=dtype)), requires_grad, name)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_local = threading.local()


def _active() -> Optional["Tape"]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Append-only record of differentiable ops.

    Use as a context manager; ops executed inside it are recorded if any
    input requires a gradient. ``backward`` walks the records in exact
    reverse append order and may only be called once.
    """

    def __init__(self):
        self.nodes: List[tuple] = []
        self.consumed = False

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable):
        if self.consumed:
            raise TapeError("cannot record on a consumed tape")
        self.nodes.append((out, tuple(inputs), backward))

    def backward(self, loss: Tensor) -> Dict[Tensor, np.ndarray]:
        """Gradients of a scalar ``loss`` for every reachable leaf tensor.

        Leaves that the loss does not depend on are absent from the result.
        """
        if self.consumed:
            raise TapeError("backward called twice on the same tape")
        if loss.data.size != 1:
            raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
        produced = {id(node[0]) for node in self.nodes}
        if id(loss) not in produced:
            raise TapeError("loss was not produced by an op recorded on this tape")
        self.consumed = True

        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: Dict[int, Tensor] = {}
        for out, inputs, fn in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in produced:
                    leaves[key] = inp
        self.nodes = []
        return {t: grads[k] for k, t in leaves.items() if k in grads}


def _emit(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    tape = _active()
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs and tape is not None)
    if out.requires_grad:
        tape.record(out, inputs, backward)
    return out


def backward(loss: Tensor, tape: Optional[Tape] = None) -> Dict[Tensor, np.ndarray]:
    tape = tape or _active()
    if tape is None:
        raise TapeError("no active tape")
    return tape.backward(loss)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def _check4(name: str, t: Tensor):
    if t.data.ndim != 4:
        raise ShapeError(f"{name}: expected 4-D (n, c, h, w), got rank {t.data.ndim}")


def _gemm_per_sample(w2: np.ndarray, cols: np.ndarray) -> np.ndarray:
    n = cols.shape[0]
    out = np.empty((n, w2.shape[0], cols.shape[2]), dtype=cols.dtype)
    for i in range(n):
        np.matmul(w2, cols[i], out=out[i])
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, pad: int = 0,
           dilation: int = 1, stride: int = 1) -> Tensor:
    """Cross-correlation of ``x`` with ``weight`` (out_c, in_c, kh, kw)."""
    _check4("conv2d input", x)
    _check4("conv2d weight", weight)
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if c != ci:
        raise ShapeError(f"conv2d channels: input has {c}, weight expects in_c={ci}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d bias: expected ({o},), got {bias.shape}")
    if x.dtype != weight.dtype:
        raise ShapeError(f"conv2d dtype: input {x.dtype} vs weight {weight.dtype}")
    oh = (h + 2 * pad - dilation * (kh - 1) - 1) // stride + 1
    ow = (w + 2 * pad - dilation * (kw - 1) - 1) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d height/width: kernel does not fit a {h}x{w} input")

    pointwise = kh == 1 and kw == 1 and pad == 0 and stride == 1
    xd = np.ascontiguousarray(x.data)
    if pointwise:
        cols = xd.reshape(n, c, h * w)
    else:
        cols = kernels.im2col(xd, kh, kw, pad, dilation, stride)
    w2 = weight.data.reshape(o, -1)
    out = _gemm_per_sample(w2, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, o, oh, ow)

    def grad_fn(g):
        gy = g.reshape(n, o, oh * ow)
        gw = np.zeros_like(w2)
        for i in range(n):
            gw += gy[i] @ cols[i].T
        gcols = np.empty(cols.shape, cols.dtype)
        for i in range(n):
            np.matmul(w2.T, gy[i], out=gcols[i])
        if pointwise:
            gx = gcols.reshape(n, c, h, w)
        else:
            gx = kernels.col2im(gcols, c, h, w, kh, kw, pad, dilation, stride)
        gb = gy.sum(axis=(0, 2)) if bias is not None else None
        return gx, gw.reshape(weight.shape), gb

    inputs = [x, weight] + ([bias] if bias is not None else [])
    return _emit(out, inputs, grad_fn)


def dense_conv1x1(features: Sequence[Tensor], weight: Tensor, bias: Optional[Tensor] = None,
                  rows: Optional[Sequence[np.ndarray]] = None,
                  assembled: Optional[np.ndarray] = None,
                  retain_concat: bool = False) -> Tensor:
    """1x1 convolution over the channel concatenation of ``features``.

    ``rows[k]`` selects the batch rows of ``features[k]`` that take part
    (gather); by default all rows. ``assembled``, when given, is a buffer that
    already holds the concatenation (the shared-workspace path) and is read
    without copying. Unless ``retain_concat`` is set the concatenation is not
    kept for backward: weight gradients are computed block by block from the
    feature tensors themselves.
    """
    if not features:
        raise ShapeError("dense_conv1x1: empty feature sequence")
    for f in features:
        _check4("dense_conv1x1 feature", f)
    if rows is None:
        rows = [None] * len(features)
    views = [f.data if r is None else f.data[r] for f, r in zip(features, rows)]
    n, _, h, w = views[0].shape
    for v in views:
        if v.shape[0] != n:
            raise ShapeError(f"dense_conv1x1 batch: {v.shape[0]} vs {n}")
        if v.shape[2:] != (h, w):
            raise ShapeError(f"dense_conv1x1 height/width: {v.shape[2:]} vs {(h, w)}")
    widths = [v.shape[1] for v in views]
    total = sum(widths)
    o, ci = weight.shape[:2]
    if weight.shape[2:] != (1, 1):
        raise ShapeError(f"dense_conv1x1 kernel: expected 1x1, got {weight.shape[2:]}")
    if ci != total:
        raise ShapeError(f"dense_conv1x1 channels: inputs sum to {total}, weight expects {ci}")
    offsets = np.concatenate([[0], np.cumsum(widths)]).astype(int)

    if assembled is None:
        assembled = np.empty((n, total, h, w), dtype=views[0].dtype)
        for k, v in enumerate(views):
            assembled[:, offsets[k]:offsets[k + 1]] = v
    elif assembled.shape != (n, total, h, w):
        raise ShapeError(f"dense_conv1x1 buffer: {assembled.shape} vs {(n, total, h, w)}")
    w2 = weight.data.reshape(o, total)
    cols = assembled.reshape(n, total, h * w)
    out = _gemm_per_sample(w2, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, o, h, w)
    kept = cols.copy() if retain_concat else None
    del cols, assembled

    def grad_fn(g):
        gy = g.reshape(n, o, h * w)
        gw = np.zeros_like(w2)
        gfeats = []
        for k, (f, r) in enumerate(zip(features, rows)):
            lo, hi = offsets[k], offsets[k + 1]
            if kept is not None:
                block = kept[:, lo:hi]
            else:
                block = (f.data if r is None else f.data[r]).reshape(n, hi - lo, h * w)
            for i in range(n):
                gw[:, lo:hi] += gy[i] @ block[i].T
            if not f.requires_grad:
                gfeats.append(None)
                continue
            wk = w2[:, lo:hi]
            gblock = np.empty((n, hi - lo, h * w), dtype=g.dtype)
            for i in range(n):
                np.matmul(wk.T, gy[i], out=gblock[i])
            gblock = gblock.reshape(n, hi - lo, h, w)
            if r is None:
                gfeats.append(gblock)
            else:
                full = np.zeros_like(f.data)
                full[r] = gblock
                gfeats.append(full)
        gb = [gy.sum(axis=(0, 2))] if bias is not None else []
        return gfeats + [gw.reshape(weight.shape)] + gb

    inputs = list(features) + [weight] + ([bias] if bias is not None else [])
    return _emit(out, inputs, grad_fn)


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return _emit(out, [x], lambda g: (g * (x.data > 0),))


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    return _emit(out, [x], lambda g: (g * out * (1 - out),))


def scale(x: Tensor, factor: float) -> Tensor:
    f = x.data.dtype.type(factor)
    return _emit(x.data * f, [x], lambda g: (g * f,))


def sum_all(x: Tensor) -> Tensor:
    return _emit(np.asarray(x.data.sum()), [x], lambda g: (np.broadcast_to(g, x.shape).copy(),))


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ShapeError("concat_channels: empty input sequence")
    for t in xs:
        _check4("concat_channels input", t)
    n, _, h, w = xs[0].shape
    for t in xs[1:]:
        if t.shape[0] != n:
            raise ShapeError(f"concat_channels batch: {t.shape[0]} vs {n}")
        if t.shape[2:] != (h, w):
            raise ShapeError(f"concat_channels height/width: {t.shape[2:]} vs {(h, w)}")
    out = np.concatenate([t.data for t in xs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def grad_fn(g):
        return [g[:, bounds[k]:bounds[k + 1]] for k in range(len(xs))]

    return _emit(out, xs, grad_fn)


def add(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ShapeError("add: empty input sequence")
    shape = xs[0].shape
    for t in xs[1:]:
        if t.shape != shape:
            dims = ("batch", "channels", "height", "width")
            bad = next((dims[i] if i < 4 else str(i) for i, (a, b) in
                        enumerate(zip(t.shape, shape)) if a != b), "rank")
            raise ShapeError(f"add {bad}: {t.shape} vs {shape}")
    out = xs[0].data.copy()
    for t in xs[1:]:
        out += t.data
    return _emit(out, xs, lambda g: [g] * len(xs))


def take_samples(x: Tensor, rows) -> Tensor:
    """Select batch rows (copy). Rows must be distinct."""
    rows = np.asarray(rows, dtype=np.intp)
    if len(np.unique(rows)) != len(rows):
        raise ShapeError("take_samples batch: duplicate rows")
    out = x.data[rows]

    def grad_fn(g):
        full = np.zeros_like(x.data)
        full[rows] = g
        return (full,)

    return _emit(out, [x], grad_fn)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def bce_with_logits(logits: Tensor, targets, valid_mask, reduction: str = "mean") -> Tensor:
    """Masked binary cross-entropy on raw logits (log-sum-exp stable form).

    ``mean`` divides the masked sum by max(1, number of valid positions).
    """
    z = logits.data
    t = np.asarray(targets, dtype=z.dtype)
    m = np.asarray(valid_mask).astype(bool)
    if t.shape != z.shape or m.shape != z.shape:
        raise ShapeError(f"bce_with_logits: logits {z.shape}, targets {t.shape}, mask {m.shape}")
    if np.any((t[m] != 0) & (t[m] != 1)):
        raise ValueError("bce_with_logits: targets must be 0 or 1 at valid positions")
    count = int(m.sum())
    denom = max(1, count) if reduction == "mean" else 1
    per = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    loss = np.asarray(np.where(m, per, 0).sum() / denom, dtype=z.dtype)

    def grad_fn(g):
        return (np.where(m, (expit(z) - t) * (g / denom), 0).astype(z.dtype),)

    return _emit(loss, [logits], grad_fn)


def softmax_ce(logits: Tensor, labels, child_mask=None, reduction: str = "mean") -> Tensor:
    """Cross-entropy over channels; label -1 is ignored.

    Channels where ``child_mask`` is false are dropped from the normalizer and
    receive exactly zero gradient.
    """
    z = logits.data
    _check4("softmax_ce logits", logits)
    n, k, h, w = z.shape
    y = np.asarray(labels)
    if y.shape != (n, h, w):
        raise ShapeError(f"softmax_ce labels: expected {(n, h, w)}, got {y.shape}")
    if np.any(y >= k) or np.any(y < -1):
        raise ValueError(f"softmax_ce: labels must lie in [-1, {k - 1}]")
    keep = np.ones(k, bool) if child_mask is None else np.asarray(child_mask, bool)
    valid = y >= 0
    if np.any(~keep[np.where(valid, y, 0)] & valid):
        raise ValueError("softmax_ce: label points at a masked channel")
    idx = np.flatnonzero(keep)
    sub = z[:, idx]
    mx = sub.max(axis=1, keepdims=True)
    ex = np.exp(sub - mx)
    tot = ex.sum(axis=1, keepdims=True)
    lse = (mx + np.log(tot))[:, 0]
    picked = np.take_along_axis(z, np.where(valid, y, 0)[:, None], axis=1)[:, 0]
    count = int(valid.sum())
    denom = max(1, count) if reduction == "mean" else 1
    loss = np.asarray(np.where(valid, lse - picked, 0).sum() / denom, dtype=z.dtype)

    def grad_fn(g):
        prob = ex / tot
        gz = np.zeros_like(z)
        gz[:, idx] = prob
        onehot = np.zeros_like(z)
        np.put_along_axis(onehot, np.where(valid, y, 0)[:, None], 1, axis=1)
        gz = (gz - onehot) * valid[:, None] * (g / denom)
        return (gz.astype(z.dtype),)

    return _emit(loss, [logits], grad_fn)

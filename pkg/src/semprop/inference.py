"""Top-down hierarchical prediction and segmentation metrics."""

from __future__ import annotations

from typing import Dict, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .dynamic import IGNORE, forward_plan, make_plan
from .hierarchy import ConceptHierarchy, DatasetBinding
from .model import STRIDE, NeuronGraph
from .tensor import Tensor


def _resolve(h: ConceptHierarchy, binding: DatasetBinding, c: int) -> int:
    """Follow single-child chains until a bound concept or a neuron."""
    while c not in binding.defined and c not in h.neurons:
        kids = h.children[c]
        if len(kids) != 1:
            raise AssertionError(f"descent reached {h.name_of(c)}, which is neither bound nor a neuron")
        c = kids[0]
    return c


def descend(scores: Dict[int, np.ndarray], h: ConceptHierarchy,
            binding: DatasetBinding) -> Tuple[np.ndarray, np.ndarray]:
    """Walk each pixel from the root using per-neuron child scores.

    ``scores[n]`` is a (T_n, h, w) array of child scores (sigmoid outputs).
    At each neuron the best enabled child wins (ties go to the lower concept
    id); descent stops at a bound concept. Returns the dataset label map and
    a (levels, h, w) array of the concepts chosen on the way (-1 past the end).
    """
    if not binding.defined:
        raise ValueError(f"binding {binding.name} defines no concepts")
    shape = next(iter(scores.values())).shape[1:]
    start = _resolve(h, binding, h.root)
    current = np.full(shape, start, dtype=np.int64)
    to_label = binding.concept_to_label
    levels = []
    for n in h.neuron_order():
        at = current == n
        if n in binding.defined or not at.any():
            continue
        mask = binding.child_mask[n]
        if not mask.any():
            raise AssertionError(f"pixels reached {h.name_of(n)} but all its children are masked")
        s = np.where(mask[:, None, None], scores[n], -np.inf)
        choice = np.argmax(s, axis=0)
        kids = np.asarray(h.children[n])
        landing = np.asarray([_resolve(h, binding, int(c)) if ok else -1
                              for c, ok in zip(kids, mask)])
        pick = kids[choice]
        current[at] = landing[choice[at]]
        d = h.neuron_depth(n) - 1
        while len(levels) <= d:
            levels.append(np.full(shape, -1, dtype=np.int64))
        levels[d][at] = pick[at]
    if any(int(c) not in binding.defined for c in np.unique(current)):
        raise AssertionError("descent ended on an unbound concept")
    keys = np.unique(current)
    labels = np.empty(shape, dtype=np.int64)
    for c in keys:
        labels[current == c] = to_label[int(c)]
    path = np.stack(levels) if levels else np.full((0,) + shape, -1, dtype=np.int64)
    return labels, path


def upsample_nearest(labels: np.ndarray, factor: int = STRIDE) -> np.ndarray:
    return np.repeat(np.repeat(labels, factor, axis=-2), factor, axis=-1)


def hierarchical_predict(model: NeuronGraph, image, h: ConceptHierarchy,
                         binding: DatasetBinding, upsample: bool = True,
                         return_path: bool = False):
    """Label map for one image (c, H, W) or (1, c, H, W) in dataset label ids."""
    x = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=model.dtype)
    if x.ndim == 3:
        x = x[None]
    plan = make_plan(h, binding.relevant_neurons())
    out = forward_plan(model, Tensor(x), plan)
    scores = {n: expit(out.logits[n].data[0]) for n in plan.neurons}
    labels, path = descend(scores, h, binding)
    if upsample:
        labels = upsample_nearest(labels)
    return (labels, path) if return_path else labels


class MetricAccumulator:
    """Confusion matrix over a dataset's label ids (rows = ground truth)."""

    def __init__(self, label_ids: Sequence[int]):
        self.label_ids = list(label_ids)
        k = len(self.label_ids)
        self.confusion = np.zeros((k, k), dtype=np.int64)

    def _encode(self, a):
        out = np.full(a.shape, -1, dtype=np.int64)
        for i, l in enumerate(self.label_ids):
            out[a == l] = i
        bad = (out < 0) & (a != IGNORE)
        if bad.any():
            raise ValueError(f"unbound label values {sorted(set(a[bad].tolist()))[:5]}")
        return out

    def merge(self, other: "MetricAccumulator") -> "MetricAccumulator":
        if other.label_ids != self.label_ids:
            raise ValueError("accumulators cover different label sets")
        self.confusion += other.confusion
        return self


def accumulate(acc: MetricAccumulator, pred: np.ndarray, gt: np.ndarray) -> MetricAccumulator:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    g = acc._encode(gt)
    keep = g >= 0
    p = acc._encode(np.where(keep, pred, IGNORE))
    if np.any(p[keep] < 0):
        raise ValueError("prediction is ignore at a labelled pixel")
    k = len(acc.label_ids)
    acc.confusion += np.bincount(g[keep] * k + p[keep], minlength=k * k).reshape(k, k)
    return acc


def metrics(acc: MetricAccumulator) -> dict:
    cm = acc.confusion.astype(np.float64)
    total = cm.sum()
    if total == 0:
        raise ValueError("empty accumulator")
    tp = np.diag(cm)
    gt = cm.sum(axis=1)
    pr = cm.sum(axis=0)
    present = gt > 0
    iou = np.divide(tp, gt + pr - tp, out=np.full_like(tp, np.nan), where=(gt + pr - tp) > 0)
    recall = np.divide(tp, gt, out=np.full_like(tp, np.nan), where=present)
    return {
        "mean_iou": float(iou[present].mean()),
        "pixel_acc": float(tp.sum() / total),
        "class_average_acc": float(recall[present].mean()),
        "per_class_iou": {int(l): (None if np.isnan(v) else float(v))
                          for l, v in zip(acc.label_ids, iou)},
    }

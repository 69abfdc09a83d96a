"""Per-sample activation, supervision with concept masking, and the loss."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, Optional, Tuple, Union

import numpy as np

from .hierarchy import ConceptHierarchy, DatasetBinding
from .model import (STRIDE, NeuronGraph, neuron_forward, root_features, stem_forward,
                    transition_forward)
from .tensor import Tensor, add, bce_with_logits, softmax_ce
from .workspace import NaiveWorkspace, PathWorkspace

log = logging.getLogger(__name__)

IGNORE = -1


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class ActivationPlan:
    """Neurons awakened for one sample, in depth-first order (root first)."""

    sample: int
    neurons: Tuple[int, ...]
    paths: Dict[int, Tuple[int, ...]] = field(compare=False, repr=False)

    def __contains__(self, nid):
        return nid in self.paths

    def __len__(self):
        return len(self.neurons)


def _dfs_order(h: ConceptHierarchy, active: FrozenSet[int]) -> Tuple[int, ...]:
    out = []
    stack = [h.root]
    while stack:
        c = stack.pop()
        if c in active:
            out.append(c)
        stack.extend(reversed(h.children[c]))
    return tuple(out)


def make_plan(h: ConceptHierarchy, active: Iterable[int], sample: int = 0) -> ActivationPlan:
    active = frozenset(active)
    for n in active:
        if n not in h.neurons:
            raise PlanError(f"{h.name_of(n)} hosts no neuron")
        missing = [a for a in h.neuron_ancestors(n) if a not in active]
        if missing:
            raise PlanError(f"{h.name_of(n)} is active but its ancestor "
                            f"{h.name_of(missing[0])} is not")
    order = _dfs_order(h, active)
    return ActivationPlan(sample, order, {n: h.neuron_ancestors(n) for n in order})


def plan_activation(present: Iterable[int], h: ConceptHierarchy, binding: DatasetBinding,
                    mode: str = "dynamic", sample: int = 0) -> ActivationPlan:
    """Dynamic: neurons at strict ancestors of the present concepts.
    Fixed: every neuron with an enabled child under ``binding``."""
    present = frozenset(present)
    if not present:
        raise PlanError("empty present-concept set")
    stray = present - binding.defined
    if stray:
        raise PlanError(f"concepts not bound in {binding.name}: "
                        f"{sorted(h.name_of(c) for c in stray)}")
    if mode == "dynamic":
        active = h.ancestor_closure(present) & h.neurons
    elif mode == "fixed":
        active = binding.relevant_neurons()
    else:
        raise ValueError(f"unknown structure mode {mode!r}")
    return make_plan(h, active, sample)


def present_concepts(labels: np.ndarray, binding: DatasetBinding) -> FrozenSet[int]:
    ids = np.unique(np.asarray(labels))
    ids = ids[ids != IGNORE]
    unknown = [int(i) for i in ids if int(i) not in binding.label_to_concept]
    if unknown:
        raise PlanError(f"label ids {unknown} not in binding {binding.name}")
    return frozenset(binding.label_to_concept[int(i)] for i in ids)


def subsample_labels(labels: np.ndarray, stride: int = STRIDE) -> np.ndarray:
    """Nearest-neighbour subsampling, picking the centre pixel of each cell."""
    return np.ascontiguousarray(labels[..., stride // 2::stride, stride // 2::stride])


def concept_map(labels: np.ndarray, binding: DatasetBinding) -> np.ndarray:
    """Dataset label ids to concept ids (ignore stays -1)."""
    labels = np.asarray(labels)
    out = np.full(labels.shape, IGNORE, dtype=np.int64)
    for lid, cid in binding.label_to_concept.items():
        out[labels == lid] = cid
    return out


@dataclass
class NeuronTarget:
    """Supervision for one neuron on one sample.

    ``child_index`` holds, per pixel, the index of the child on the path to
    the ground-truth concept, or -1 where the pixel is not routed through
    this neuron (or is ignored).
    """

    child_index: np.ndarray
    child_mask: np.ndarray

    @property
    def pixel_valid(self) -> np.ndarray:
        return self.child_index >= 0

    def targets(self) -> np.ndarray:
        k = len(self.child_mask)
        return (self.child_index[None] == np.arange(k)[:, None, None]).astype(np.float64)

    def valid_mask(self) -> np.ndarray:
        return self.pixel_valid[None] & self.child_mask[:, None, None]


SupervisionTarget = Dict[int, NeuronTarget]


def build_supervision(labels: np.ndarray, plan: ActivationPlan, h: ConceptHierarchy,
                      binding: DatasetBinding) -> SupervisionTarget:
    """Per-neuron child targets for a label map already at feature resolution."""
    concepts = concept_map(labels, binding)
    present = np.unique(concepts[concepts != IGNORE])
    for g in present:
        owners = h.neuron_ancestors(int(g))
        if not owners or owners[-1] not in plan:
            raise PlanError(f"concept {h.name_of(int(g))} has no activated parent neuron")
    out: SupervisionTarget = {}
    for n in plan.neurons:
        lut = {}
        for g in present:
            child = h.path_child(n, int(g))
            lut[int(g)] = -1 if child is None else h.children[n].index(child)
        idx = np.full(concepts.shape, -1, dtype=np.int64)
        for g, j in lut.items():
            if j >= 0:
                idx[concepts == g] = j
        mask = binding.child_mask[n]
        idx[(idx >= 0) & ~mask[np.maximum(idx, 0)]] = -1
        out[n] = NeuronTarget(idx, mask.copy())
    return out


@dataclass
class PlanOutputs:
    h0: Tensor
    hidden: Dict[int, Tensor]
    logits: Dict[int, Tensor]
    executions: int = 0


def forward_plan(model: NeuronGraph, image: Tensor, plan: ActivationPlan,
                 workspace: Optional[Union[PathWorkspace, NaiveWorkspace]] = None) -> PlanOutputs:
    """Run the stem, the transition, then each activated neuron along the tree.

    With a :class:`PathWorkspace` the dense inputs are read from shared depth
    slots; with a :class:`NaiveWorkspace` each neuron concatenates a fresh
    copy that stays alive for backward. Both give identical numbers.
    """
    h0 = transition_forward(model, stem_forward(model, image))
    root = root_features(model, h0)
    out = PlanOutputs(h0, {}, {})
    dense = model.config.propagation == "dense" and model.config.aggregation == "concat"

    def inputs_for(n):
        path = plan.paths[n]
        if model.config.propagation == "parent_only":
            return [out.hidden[path[-1]]] if path else [h0]
        return [root] + [out.hidden[a] for a in path]

    if isinstance(workspace, PathWorkspace) and dense:
        _forward_shared(model, plan, root, out, workspace, inputs_for)
        return out
    naive = isinstance(workspace, NaiveWorkspace) and dense
    for n in plan.neurons:
        if naive:
            workspace.note_concat(model.neurons[n].depth)
        hid, logit = neuron_forward(model, n, inputs_for(n), retain_concat=naive)
        out.hidden[n], out.logits[n] = hid, logit
        out.executions += 1
    return out


def _forward_shared(model, plan, root, out, ws, inputs_for):
    h = model.hierarchy
    batch = root.shape[0]
    slot0 = ws.acquire(0, root.shape, root.dtype)
    slot0.view[...] = root.data
    kids = {n: [c for c in plan.neurons if plan.paths[c] and plan.paths[c][-1] == n]
            for n in plan.neurons}

    def visit(n):
        d = model.neurons[n].depth
        hid, logit = neuron_forward(model, n, inputs_for(n), assembled=ws.prefix(d, batch))
        out.hidden[n], out.logits[n] = hid, logit
        out.executions += 1
        slot = ws.acquire(d, hid.shape, hid.dtype)
        slot.view[...] = hid.data
        for c in kids[n]:
            visit(c)
        ws.release(slot)

    for n in plan.neurons:
        if not plan.paths[n]:
            visit(n)
    ws.release(slot0)


def neuron_loss(logits: Tensor, target: NeuronTarget, head_loss: str = "bce",
                reduction: str = "mean") -> Tensor:
    """Loss of one neuron on one sample; ``logits`` is (1, T, h, w)."""
    if head_loss == "bce":
        return bce_with_logits(logits, target.targets()[None], target.valid_mask()[None], reduction)
    return softmax_ce(logits, target.child_index[None], target.child_mask, reduction)


def dsspn_loss(logits: Dict[int, Tensor], targets: SupervisionTarget, config) -> Tensor:
    """Sum of per-neuron losses over the activated neurons of one sample."""
    if set(logits) != set(targets):
        raise PlanError("outputs and targets cover different neurons")
    terms = [neuron_loss(logits[n], targets[n], config.head_loss, config.loss_reduction)
             for n in sorted(logits)]
    if not terms:
        return Tensor(np.zeros((), dtype=np.float32))
    return terms[0] if len(terms) == 1 else add(terms)

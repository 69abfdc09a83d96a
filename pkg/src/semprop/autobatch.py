"""Dynamic batching: run each distinct neuron once per batch over the samples
that activated it."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .dynamic import ActivationPlan, SupervisionTarget, neuron_loss
from .model import NeuronGraph, neuron_forward, root_features, stem_forward, transition_forward
from .tensor import Tensor, add, take_samples


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class BatchSchedule:
    steps: Tuple[Tuple[int, Tuple[int, ...]], ...]
    num_samples: int

    def __len__(self):
        return len(self.steps)


def schedule(plans: Sequence[ActivationPlan], h) -> BatchSchedule:
    """Group (neuron, sample) executions by neuron, ordered by (depth, id).

    Sample indices are positions in ``plans``.
    """
    if not plans:
        raise ScheduleError("no plans to schedule")
    users: Dict[int, List[int]] = {}
    for i, plan in enumerate(plans):
        for n in plan.neurons:
            users.setdefault(n, []).append(i)
    order = sorted(users, key=lambda n: (h.neuron_depth(n), n))
    return BatchSchedule(tuple((n, tuple(users[n])) for n in order), len(plans))


def batch_stats(sched: BatchSchedule, plans: Sequence[ActivationPlan]) -> dict:
    total = sum(len(p) for p in plans)
    return {
        "steps": len(sched.steps),
        "executions": total,
        "merged": total - len(sched.steps),
        "avg_activated": total / len(plans) if plans else 0.0,
    }


@dataclass
class BatchedOutputs:
    h0: Tensor
    hidden: Dict[int, Tensor] = field(default_factory=dict)
    logits: Dict[int, Tensor] = field(default_factory=dict)
    rows: Dict[int, Dict[int, int]] = field(default_factory=dict)
    invocations: int = 0

    def sample_logits(self, sample: int) -> Dict[int, np.ndarray]:
        return {n: self.logits[n].data[r[sample]:r[sample] + 1]
                for n, r in self.rows.items() if sample in r}

    def sample_hidden(self, sample: int) -> Dict[int, np.ndarray]:
        return {n: self.hidden[n].data[r[sample]:r[sample] + 1]
                for n, r in self.rows.items() if sample in r}


def execute_batched(model: NeuronGraph, images: Tensor, plans: Sequence[ActivationPlan],
                    sched: BatchSchedule) -> BatchedOutputs:
    """Gather, run once, scatter: one neuron invocation per schedule step."""
    if images.shape[0] != len(plans) or sched.num_samples != len(plans):
        raise ScheduleError(f"batch of {images.shape[0]} images, {len(plans)} plans, "
                            f"schedule for {sched.num_samples}")
    h0 = transition_forward(model, stem_forward(model, images))
    root = root_features(model, h0)
    out = BatchedOutputs(h0)
    parent_only = model.config.propagation == "parent_only"
    for n, samples in sched.steps:
        for s in samples:
            if n not in plans[s]:
                raise ScheduleError(f"schedule runs neuron {n} for sample {s} outside its plan")
        path = plans[samples[0]].paths[n]
        idx = np.asarray(samples, dtype=np.intp)
        if parent_only:
            src = [out.hidden[path[-1]]] if path else [h0]
            srows = [[out.rows[path[-1]][s] for s in samples]] if path else [idx]
        else:
            src = [root] + [out.hidden[a] for a in path]
            srows = [idx] + [[out.rows[a][s] for s in samples] for a in path]
        srows = [np.asarray(r, dtype=np.intp) for r in srows]
        if parent_only:
            hid, logit = neuron_forward(model, n, [take_samples(src[0], srows[0])])
        else:
            hid, logit = neuron_forward(model, n, src, rows=srows)
        out.hidden[n], out.logits[n] = hid, logit
        out.rows[n] = {s: r for r, s in enumerate(samples)}
        out.invocations += 1
    return out


def batched_loss(outputs: BatchedOutputs, targets: Sequence[SupervisionTarget], config) -> Tensor:
    """Sum over samples of each sample's loss (per-sample normalization)."""
    terms = []
    for s, target in enumerate(targets):
        per = [neuron_loss(take_samples(outputs.logits[n], [outputs.rows[n][s]]), target[n],
                           config.head_loss, config.loss_reduction)
               for n in sorted(target)]
        if per:
            terms.append(per[0] if len(per) == 1 else add(per))
    if not terms:
        return Tensor(np.zeros((), dtype=outputs.h0.dtype))
    return terms[0] if len(terms) == 1 else add(terms)

"""Training loop: single-dataset and universal (joint then per-dataset fine-tune)."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .autobatch import batch_stats, batched_loss, execute_batched, schedule
from .dynamic import (IGNORE, build_supervision, plan_activation, present_concepts,
                      subsample_labels)
from .hierarchy import ConceptHierarchy, load_hierarchy
from .inference import MetricAccumulator, accumulate, hierarchical_predict, metrics
from .model import STRIDE, ModelConfig, NeuronGraph, build_model
from .optim import OptimState, sgd_step
from .synth import DatasetManifest
from .tensor import Tape, Tensor, scale
from .tensorio import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    base_lr: float = 0.003
    finetune_lr_factor: float = 0.1
    power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 0.0001
    epochs: int = 90
    steps: Optional[int] = None
    batch_size: int = 4
    crop_size: int = 32
    flip: bool = True
    crop: bool = True
    resize: bool = True
    resize_range: Tuple[float, float] = (0.5, 2.0)
    mode: str = "single"
    joint_epochs: int = 60
    finetune_epochs: int = 20
    joint_steps: Optional[int] = None
    finetune_steps: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        self.resize_range = tuple(self.resize_range)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.crop_size % STRIDE:
            raise ValueError(f"crop_size must be divisible by {STRIDE}")
        if self.mode not in ("single", "universal"):
            raise ValueError("mode must be 'single' or 'universal'")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def augment(image: np.ndarray, labels: np.ndarray, cfg: TrainConfig, rng) -> Tuple[np.ndarray, np.ndarray]:
    """Flip, resize and crop an image (c, H, W) and its label map (H, W) together."""
    if cfg.flip and rng.random() < 0.5:
        image = image[:, :, ::-1]
        labels = labels[:, ::-1]
    if cfg.resize:
        s = rng.uniform(*cfg.resize_range)
        hh = max(1, int(round(labels.shape[0] * s)))
        ww = max(1, int(round(labels.shape[1] * s)))
        zoom = (hh / labels.shape[0], ww / labels.shape[1])
        image = ndimage.zoom(image, (1,) + zoom, order=1, mode="nearest", grid_mode=True)
        labels = ndimage.zoom(labels, zoom, order=0, mode="nearest", grid_mode=True)
    size = cfg.crop_size
    if cfg.crop or image.shape[1:] != (size, size):
        ph, pw = max(0, size - labels.shape[0]), max(0, size - labels.shape[1])
        if ph or pw:
            image = np.pad(image, ((0, 0), (0, ph), (0, pw)))
            labels = np.pad(labels, ((0, ph), (0, pw)), constant_values=IGNORE)
        y = rng.integers(0, labels.shape[0] - size + 1) if cfg.crop else 0
        x = rng.integers(0, labels.shape[1] - size + 1) if cfg.crop else 0
        image = image[:, y:y + size, x:x + size]
        labels = labels[y:y + size, x:x + size]
    return np.ascontiguousarray(image), np.ascontiguousarray(labels)


@dataclass
class Phase:
    name: str
    datasets: List[int]
    steps: int
    lr: float


@dataclass
class TrainResult:
    model: NeuronGraph
    log: List[dict]
    checkpoints: Dict[str, Dict[str, np.ndarray]]
    checkpoint_paths: Dict[str, str] = field(default_factory=dict)


def _steps_for(epochs: int, n: int, batch: int) -> int:
    return max(1, epochs * math.ceil(n / batch))


def plan_phases(cfg: TrainConfig, datasets: Sequence[DatasetManifest]) -> List[Phase]:
    if not datasets:
        raise ValueError("no datasets given")
    for d in datasets:
        if len(d) == 0:
            raise ValueError(f"dataset {d.name} is empty")
    if cfg.mode == "single":
        steps = cfg.steps or _steps_for(cfg.epochs, sum(len(d) for d in datasets), cfg.batch_size)
        return [Phase("train", list(range(len(datasets))), steps, cfg.base_lr)]
    if len(datasets) < 2:
        raise ValueError("universal training needs at least two datasets")
    total = sum(len(d) for d in datasets)
    phases = [Phase("joint", list(range(len(datasets))),
                    cfg.joint_steps or _steps_for(cfg.joint_epochs, total, cfg.batch_size),
                    cfg.base_lr)]
    for i, d in enumerate(datasets):
        steps = cfg.finetune_steps or _steps_for(cfg.finetune_epochs, len(d), cfg.batch_size)
        phases.append(Phase(f"finetune:{d.name}", [i], steps, cfg.base_lr * cfg.finetune_lr_factor))
    return phases


class _Sampler:
    """Cycles through shuffled permutations of one dataset."""

    def __init__(self, n, rng):
        self.n, self.rng, self.queue = n, rng, []

    def take(self, k):
        out = []
        while len(out) < k:
            if not self.queue:
                self.queue = list(self.rng.permutation(self.n))
            out.append(self.queue.pop(0))
        return out


def train_step(model: NeuronGraph, h: ConceptHierarchy, binding, images, labels,
               state: OptimState, it: int):
    """One forward/backward/update on a single-dataset batch.

    Returns (loss, lr, plans, grads); ``lr`` is None when every sample in the
    batch was empty after ignore filtering.
    """
    cfg = model.config
    keep, plans, lab8 = [], [], []
    for i, lab in enumerate(labels):
        sub = subsample_labels(lab)
        present = present_concepts(sub, binding)
        if not present:
            log.warning("skipping sample with no labelled pixels")
            continue
        plans.append(plan_activation(present, h, binding, cfg.structure, sample=len(keep)))
        keep.append(i)
        lab8.append(sub)
    if not keep:
        return 0.0, None, [], {}
    x = Tensor(np.stack([images[i] for i in keep]).astype(model.dtype))
    sched = schedule(plans, h)
    with Tape() as tape:
        out = execute_batched(model, x, plans, sched)
        targets = [build_supervision(l8, p, h, binding) for l8, p in zip(lab8, plans)]
        loss = scale(batched_loss(out, targets, cfg), 1.0 / len(keep))
        if not loss.requires_grad:
            return float(loss.data), None, plans, {}
        grads = tape.backward(loss)
    value = float(loss.data)
    if not math.isfinite(value) or any(not np.all(np.isfinite(g)) for g in grads.values()):
        raise TrainingDiverged(f"non-finite loss {value} at iteration {it}; "
                               f"activated {[len(p) for p in plans]} neurons per sample")
    lr = sgd_step(model.params(), grads, state, it)
    return value, lr, plans, grads


def train(cfg: TrainConfig, datasets: Sequence[DatasetManifest], h: ConceptHierarchy,
          model: Optional[NeuronGraph] = None,
          on_step: Optional[Callable[[dict, Dict], None]] = None,
          output_dir: Optional[str] = None) -> TrainResult:
    """Run every phase; emits one JSON-serializable log record per step.

    Each step draws a single dataset (weighted by size) and a batch from it
    alone. ``on_step(record, grads)`` is called after every update.
    """
    phases = plan_phases(cfg, datasets)
    model = model or build_model(h, cfg.model, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    bindings = [h.binding(d.binding) for d in datasets]
    samplers = [_Sampler(len(d), rng) for d in datasets]
    records: List[dict] = []
    checkpoints: Dict[str, Dict[str, np.ndarray]] = {}
    paths: Dict[str, str] = {}
    log_fh = None
    if output_dir:
        os.makedirs(output_dir, exist_ok=True)
        log_fh = open(os.path.join(output_dir, "train_log.jsonl"), "w")
    step = 0
    try:
        for phase in phases:
            state = OptimState(phase.lr, cfg.momentum, cfg.weight_decay, cfg.power, phase.steps)
            sizes = np.array([len(datasets[i]) for i in phase.datasets], dtype=float)
            for it in range(phase.steps):
                di = phase.datasets[rng.choice(len(sizes), p=sizes / sizes.sum())]
                ds = datasets[di]
                batch = samplers[di].take(cfg.batch_size)
                pairs = [augment(ds.images[i], ds.labels[i], cfg, rng) for i in batch]
                loss, lr, plans, grads = train_step(model, h, bindings[di], [p[0] for p in pairs],
                                                    [p[1] for p in pairs], state, it)
                rec = {"step": step, "phase": phase.name, "dataset": ds.name, "loss": loss,
                       "lr": lr if lr is not None else state.lr(it),
                       "activated_neurons_avg": float(np.mean([len(p) for p in plans])) if plans else 0.0}
                records.append(rec)
                if log_fh:
                    log_fh.write(json.dumps(rec) + "\n")
                if on_step:
                    on_step(rec, grads)
                step += 1
            checkpoints[phase.name] = model.state_dict()
            if output_dir:
                paths[phase.name] = save_checkpoint(
                    os.path.join(output_dir, "checkpoint_" + phase.name.replace(":", "_")),
                    checkpoints[phase.name],
                    {"phase": phase.name, "model_config": cfg.model.to_dict(),
                     "hierarchy": h.to_document()})
    finally:
        if log_fh:
            log_fh.close()
    return TrainResult(model, records, checkpoints, paths)


def evaluate(model: NeuronGraph, h: ConceptHierarchy, manifest: DatasetManifest) -> dict:
    binding = h.binding(manifest.binding)
    acc = MetricAccumulator(binding.label_ids)
    for img, lab in zip(manifest.images, manifest.labels):
        pred = hierarchical_predict(model, img, h, binding)
        accumulate(acc, pred, lab)
    return metrics(acc)


def load_trained(manifest_path: str) -> Tuple[NeuronGraph, ConceptHierarchy, dict]:
    """Rebuild a model from a checkpoint written by :func:`train`."""
    meta, params = load_checkpoint(manifest_path)
    for key in ("model_config", "hierarchy"):
        if key not in meta:
            raise ValueError(f"{manifest_path}: checkpoint lacks '{key}'")
    h = load_hierarchy(meta["hierarchy"])
    model = build_model(h, ModelConfig.from_dict(meta["model_config"]))
    model.load_state_dict(params)
    return model, h, meta

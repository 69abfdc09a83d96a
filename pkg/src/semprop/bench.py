"""Measurements behind the ``bench-autobatch`` and ``bench-memory`` commands."""

from __future__ import annotations

import time
from typing import Optional

import numpy as np

from .autobatch import batch_stats, execute_batched, schedule
from .dynamic import forward_plan, make_plan, plan_activation
from .hierarchy import ConceptHierarchy, load_hierarchy
from .model import STRIDE, ModelConfig, NeuronGraph, build_model
from .tensor import Tensor
from .workspace import NaiveWorkspace, PathWorkspace


def chain_hierarchy(depth: int = 5) -> ConceptHierarchy:
    """A spine of ``depth`` neurons, each with one leaf and one deeper child."""
    concepts = [{"name": "n1", "parent": None}]
    for d in range(1, depth + 1):
        concepts.append({"name": f"leaf{d}", "parent": f"n{d}"})
        concepts.append({"name": f"n{d + 1}" if d < depth else f"leaf{d}b", "parent": f"n{d}"})
    if depth > 0:
        concepts[-1]["name"] = f"tip{depth}"
    return load_hierarchy({"concepts": concepts})


def random_plans(h: ConceptHierarchy, binding, count: int, rng, labels_per_sample: int = 3):
    defined = sorted(binding.defined)
    plans = []
    for s in range(count):
        k = int(rng.integers(1, min(labels_per_sample, len(defined)) + 1))
        present = rng.choice(defined, size=k, replace=False).tolist()
        plans.append(plan_activation(present, h, binding, sample=s))
    return plans


def bench_autobatch(model: NeuronGraph, binding, batch_size: int = 4, image_size: int = 32,
                    repeats: int = 5, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    h = model.hierarchy
    plans = random_plans(h, binding, batch_size, rng)
    images = rng.standard_normal((batch_size, model.config.in_channels, image_size,
                                  image_size)).astype(model.dtype)
    sched = schedule(plans, h)

    def batched():
        execute_batched(model, Tensor(images), plans, sched)

    def sequential():
        for i, p in enumerate(plans):
            forward_plan(model, Tensor(images[i:i + 1]), p)

    timings = {}
    for name, fn in (("batched", batched), ("sequential", sequential)):
        fn()
        best = np.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            best = min(best, time.perf_counter() - t0)
        timings[name] = best
    stats = batch_stats(sched, plans)
    return {
        "steps": stats["steps"],
        "merged": stats["merged"],
        "executions": stats["executions"],
        "avg_activated": stats["avg_activated"],
        "batched_seconds": timings["batched"],
        "sequential_seconds": timings["sequential"],
        "speedup_vs_sequential_wallclock": timings["sequential"] / timings["batched"],
    }


def bench_memory(model: NeuronGraph, image_size: int = 16, seed: int = 0) -> dict:
    """Peak feature-buffer counts with and without shared slots over a full pass."""
    h = model.hierarchy
    plan = make_plan(h, h.neurons)
    depth = max(model.neurons[n].depth for n in plan.neurons)
    rng = np.random.default_rng(seed)
    image = Tensor(rng.standard_normal((1, model.config.in_channels, image_size, image_size))
                   .astype(model.dtype))
    shared = PathWorkspace(model.config.m0, model.config.m, depth)
    naive = NaiveWorkspace()
    a = forward_plan(model, image, plan, shared)
    b = forward_plan(model, image, plan, naive)
    identical = all(np.array_equal(a.logits[n].data, b.logits[n].data) and
                    np.array_equal(a.hidden[n].data, b.hidden[n].data) for n in plan.neurons)
    return {
        "peak_buffers": shared.high_water,
        "naive_peak_buffers": naive.high_water,
        "ratio": naive.high_water / shared.high_water,
        "max_neuron_depth": depth,
        "identical_outputs": identical,
    }

import numpy as np
import pytest

from semprop.autobatch import (ScheduleError, batch_stats, batched_loss, execute_batched,
                               schedule)
from semprop.dynamic import build_supervision, dsspn_loss, forward_plan, make_plan, plan_activation
from semprop.hierarchy import load_hierarchy
from semprop.model import build_model
from semprop.tensor import Tape, Tensor, add

from _trees import random_tree_doc
from conftest import tiny_config


def test_shared_root_merges(concept_tree):
    h = concept_tree
    plans = [make_plan(h, [h.root], s) for s in range(2)]
    sched = schedule(plans, h)
    assert sched.steps == ((h.root, (0, 1)),)
    assert batch_stats(sched, plans) == {"steps": 1, "executions": 2, "merged": 1, "avg_activated": 1.0}


def test_disjoint_depth2(concept_tree):
    h = concept_tree
    way, plant = h.id_of("way"), h.id_of("plant-stuff")
    plans = [make_plan(h, [h.root, way]), make_plan(h, [h.root, plant])]
    sched = schedule(plans, h)
    assert sched.steps[0] == (h.root, (0, 1))
    assert sorted(sched.steps[1:]) == sorted([(way, (0,)), (plant, (1,))])
    assert batch_stats(sched, plans)["merged"] == 1


def test_identical_plans(concept_tree):
    h = concept_tree
    active = [h.root, h.id_of("furniture-things"), h.id_of("table")]
    plans = [make_plan(h, active), make_plan(h, active)]
    assert batch_stats(schedule(plans, h), plans)["merged"] == 3


def test_empty_batch(concept_tree):
    with pytest.raises(ScheduleError):
        schedule([], concept_tree)


def random_plans(h, b, rng, k):
    defined = sorted(b.defined)
    out = []
    for s in range(k):
        present = rng.choice(defined, size=int(rng.integers(1, 4)), replace=False).tolist()
        out.append(plan_activation(present, h, b, sample=s))
    return out


def test_schedule_invariants(rng):
    for _ in range(20):
        h = load_hierarchy(random_tree_doc(rng, 20))
        plans = random_plans(h, h.binding("all"), rng, 5)
        sched = schedule(plans, h)
        pairs = [(n, s) for n, ss in sched.steps for s in ss]
        assert len(pairs) == len(set(pairs))
        assert sorted(pairs) == sorted((n, p.sample) for p in plans for n in p.neurons)
        assert len(sched) == len({n for p in plans for n in p.neurons})
        pos = {n: i for i, (n, _) in enumerate(sched.steps)}
        assert all(pos[a] < pos[n] for p in plans for n in p.neurons for a in p.paths[n])
        stats = batch_stats(sched, plans)
        assert stats["executions"] == sum(len(p) for p in plans)
        assert stats["merged"] == stats["executions"] - stats["steps"]


def test_batch_of_one_bit_identical(concept_tree, rng):
    h = concept_tree
    model = build_model(h, tiny_config(), seed=0)
    plan = make_plan(h, h.neurons)
    x = Tensor(rng.standard_normal((1, 3, 16, 16)).astype(np.float32))
    out = execute_batched(model, x, [plan], schedule([plan], h))
    ref = forward_plan(model, x, plan)
    for n in plan.neurons:
        np.testing.assert_array_equal(out.logits[n].data, ref.logits[n].data)
        np.testing.assert_array_equal(out.hidden[n].data, ref.hidden[n].data)


@pytest.mark.parametrize("variant", [{}, {"aggregation": "sum"}, {"propagation": "parent_only"}])
def test_batched_matches_sequential(concept_tree, variant, rng):
    h = concept_tree
    b = h.binding("cocostuff-like")
    model = build_model(h, tiny_config(dtype="float64", **variant), seed=1)
    plans = random_plans(h, b, rng, 4)
    x = rng.standard_normal((4, 3, 16, 16))
    sched = schedule(plans, h)
    out = execute_batched(model, Tensor(x), plans, sched)
    assert out.invocations == len(sched)
    for s, p in enumerate(plans):
        ref = forward_plan(model, Tensor(x[s:s + 1]), p)
        for n, v in out.sample_logits(s).items():
            np.testing.assert_array_equal(v, ref.logits[n].data)
        for n, v in out.sample_hidden(s).items():
            np.testing.assert_array_equal(v, ref.hidden[n].data)


def test_batched_gradients_match_per_sample_sum(concept_tree, rng):
    h = concept_tree
    b = h.binding("cocostuff-like")
    model = build_model(h, tiny_config(dtype="float64"), seed=2)
    params = model.params()
    plans = random_plans(h, b, rng, 3)
    x = rng.standard_normal((3, 3, 16, 16))
    labels = []
    for p in plans:
        lab = rng.choice([b.concept_to_label[c] for c in b.defined if set(h.neuron_ancestors(c)) <= set(p.neurons)
                          and h.neuron_ancestors(c)], size=(2, 2))
        labels.append(lab)
    targets = [build_supervision(l, p, h, b) for l, p in zip(labels, plans)]
    with Tape() as tape:
        out = execute_batched(model, Tensor(x), plans, schedule(plans, h))
        gb = tape.backward(batched_loss(out, targets, model.config))
    total = {}
    for s, p in enumerate(plans):
        with Tape() as tape:
            ref = forward_plan(model, Tensor(x[s:s + 1]), p)
            g = tape.backward(dsspn_loss(ref.logits, targets[s], model.config))
        for t, v in g.items():
            total[t] = total.get(t, 0) + v
    assert set(gb) == set(total)
    for t in params.values():
        if t in total:
            err = np.linalg.norm(gb[t] - total[t]) / max(np.linalg.norm(total[t]), 1e-300)
            assert err < 1e-10


def test_mismatch_errors(concept_tree, rng):
    h = concept_tree
    model = build_model(h, tiny_config(), seed=0)
    plans = [make_plan(h, [h.root], 0), make_plan(h, [h.root], 1)]
    with pytest.raises(ScheduleError):
        execute_batched(model, Tensor(np.zeros((3, 3, 8, 8), np.float32)), plans, schedule(plans, h))

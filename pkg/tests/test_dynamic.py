import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from semprop.dynamic import (IGNORE, PlanError, build_supervision, concept_map, dsspn_loss,
                             forward_plan, make_plan, neuron_loss, plan_activation,
                             present_concepts, subsample_labels)
from semprop.gradcheck import numeric_grad
from semprop.hierarchy import load_hierarchy
from semprop.model import build_model
from semprop.tensor import Tape, Tensor

from _trees import random_tree_doc, strict_ancestor_neurons
from conftest import names, tiny_config


def ids(h, *ns):
    return [h.id_of(n) for n in ns]


def test_worked_example_activation(concept_tree):
    h = concept_tree
    b = h.binding("ade20k-like")
    plan = plan_activation(ids(h, "tree", "grass", "plant-other", "fence", "animal-things"), h, b)
    assert names(h, plan.neurons) == {"entity", "structure-stuff", "plant-stuff"}
    assert plan.neurons[0] == h.root
    assert "animal-things" not in names(h, plan.neurons)


def test_direct_child_activates_root_only(concept_tree):
    h = concept_tree
    plan = plan_activation(ids(h, "animal-things"), h, h.binding("ade20k-like"))
    assert plan.neurons == (h.root,)


def test_fixed_mode_covers_dynamic(concept_tree):
    h = concept_tree
    b = h.binding("cityscape-like")
    fixed = plan_activation(ids(h, "road"), h, b, mode="fixed")
    assert names(h, fixed.neurons) == {"entity", "way", "plant-stuff", "structure-stuff"}
    assert set(plan_activation(ids(h, "road"), h, b).neurons) <= set(fixed.neurons)


def test_plan_errors(concept_tree):
    h = concept_tree
    b = h.binding("cityscape-like")
    with pytest.raises(PlanError):
        plan_activation([], h, b)
    with pytest.raises(PlanError):
        plan_activation(ids(h, "lane"), h, b)
    with pytest.raises(PlanError):
        make_plan(h, ids(h, "way"))
    with pytest.raises(PlanError):
        make_plan(h, ids(h, "entity", "road"))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_random_activation_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    doc = random_tree_doc(rng, 25)
    h = load_hierarchy(doc)
    b = h.binding("all")
    defined = sorted(b.defined)
    present = rng.choice(defined, size=int(rng.integers(1, len(defined) + 1)), replace=False).tolist()
    plan = plan_activation(present, h, b)
    assert names(h, plan.neurons) == strict_ancestor_neurons(doc, [h.name_of(c) for c in present])
    assert set(plan.neurons) <= set(plan_activation(present, h, b, mode="fixed").neurons)
    # preorder: every neuron appears after its ancestors
    pos = {n: i for i, n in enumerate(plan.neurons)}
    assert all(pos[a] < pos[n] for n in plan.neurons for a in plan.paths[n])


def test_present_concepts(concept_tree, rng):
    h = concept_tree
    b = h.binding("cityscape-like")
    assert present_concepts(np.full((4, 4), IGNORE), b) == frozenset()
    lab = np.full((4, 4), IGNORE)
    lab[0, :2] = 0
    lab[3, 3] = 4
    got = present_concepts(lab, b)
    assert got == frozenset({b.label_to_concept[0], b.label_to_concept[4]})
    perm = rng.permutation(16)
    assert present_concepts(lab.reshape(-1)[perm].reshape(4, 4), b) == got
    lab[1, 1] = 99
    with pytest.raises(PlanError):
        present_concepts(lab, b)


def test_subsample_picks_cell_centres():
    lab = np.arange(16 * 16).reshape(16, 16)
    sub = subsample_labels(lab)
    assert sub.shape == (2, 2)
    assert sub[0, 0] == lab[4, 4] and sub[1, 1] == lab[12, 12]


def test_lane_supervision(concept_tree):
    h = concept_tree
    b = h.binding("cityscape-like")
    to_label = b.concept_to_label
    lab = np.array([[to_label[h.id_of("road")], to_label[h.id_of("sidewalk")]],
                    [to_label[h.id_of("tree")], IGNORE]])
    plan = plan_activation(present_concepts(lab, b), h, b)
    tgt = build_supervision(lab, plan, h, b)
    way = h.id_of("way")
    lane_j = h.children[way].index(h.id_of("lane"))
    assert not tgt[way].valid_mask()[lane_j].any()
    assert tgt[way].child_index.tolist() == [[0, 1], [-1, -1]]
    root = tgt[h.root]
    assert root.child_index[1, 1] == -1
    assert root.child_index[0, 0] == h.children[h.root].index(way)


def test_coarse_label_has_no_supervision_below(concept_tree):
    h = concept_tree
    b = h.binding("ade20k-like")
    lab = np.full((2, 2), b.concept_to_label[h.id_of("animal-things")])
    plan = plan_activation(present_concepts(lab, b), h, b)
    tgt = build_supervision(lab, plan, h, b)
    assert set(tgt) == {h.root}
    t = tgt[h.root].targets()
    j = h.children[h.root].index(h.id_of("animal-things"))
    assert t[j].all() and t.sum() == 4


def test_supervision_requires_plan(concept_tree):
    h = concept_tree
    b = h.binding("cityscape-like")
    lab = np.array([[b.concept_to_label[h.id_of("road")]]])
    with pytest.raises(PlanError):
        build_supervision(lab, make_plan(h, [h.root]), h, b)


@pytest.fixture
def small(concept_tree):
    return build_model(concept_tree, tiny_config(dtype="float64"), seed=0)


def image(rng, n=1, size=16):
    return Tensor(rng.standard_normal((n, 3, size, size)))


def test_execution_counts(concept_tree, small, rng):
    h = concept_tree
    out = forward_plan(small, image(rng), make_plan(h, [h.root]))
    assert out.executions == 1
    plan = make_plan(h, ids(h, "entity", "furniture-things", "table"))
    out = forward_plan(small, image(rng), plan)
    assert out.executions == 3
    assert set(out.logits) == set(plan.neurons)


def test_inactive_neurons_get_no_gradient(concept_tree, small, rng):
    h = concept_tree
    b = h.binding("cocostuff-like")
    lab = np.full((2, 2), b.concept_to_label[h.id_of("road")])
    plan = plan_activation(present_concepts(lab, b), h, b)
    tgt = build_supervision(lab, plan, h, b)
    with Tape() as tape:
        loss = dsspn_loss(forward_plan(small, image(rng), plan).logits, tgt, small.config)
        grads = tape.backward(loss)
    params = small.params()
    for nid in h.neurons:
        for t in small.neuron_params(nid).values():
            assert (t in grads) == (nid in plan)
    # finite differences agree that an inactive head has zero sensitivity
    head = params["neuron.table.head.weight"]
    x = image(rng)
    f = lambda: float(dsspn_loss(forward_plan(small, x, plan).logits, tgt, small.config).data)
    assert not numeric_grad(f, head.data, coords=np.arange(4)).any()


def test_loss_zero_cases(concept_tree, small):
    h = concept_tree
    b = h.binding("cityscape-like")
    way = h.id_of("way")
    plan = make_plan(h, [h.root, way])
    empty = build_supervision(np.full((2, 2), IGNORE), plan, h, b)
    logits = {n: Tensor(np.zeros((1, len(h.children[n]), 2, 2))) for n in plan.neurons}
    assert float(dsspn_loss(logits, empty, small.config).data) == 0.0
    lab = np.full((2, 2), b.concept_to_label[h.id_of("road")])
    tgt = build_supervision(lab, plan, h, b)
    perfect = {n: Tensor(np.where(tgt[n].targets()[None] > 0, 50.0, -50.0)) for n in plan.neurons}
    assert float(dsspn_loss(perfect, tgt, small.config).data) < 1e-6


@pytest.mark.parametrize("head", ["bce", "softmax"])
def test_masked_child_logit_gradient_is_zero(concept_tree, head, rng):
    h = concept_tree
    b = h.binding("cityscape-like")
    way = h.id_of("way")
    lab = np.array([[b.concept_to_label[h.id_of("road")], b.concept_to_label[h.id_of("sidewalk")]]])
    plan = plan_activation(present_concepts(lab, b), h, b)
    tgt = build_supervision(lab, plan, h, b)[way]
    z = Tensor(rng.standard_normal((1, 3, 1, 2)), requires_grad=True)
    with Tape() as tape:
        g = tape.backward(neuron_loss(z, tgt, head))[z]
    lane = h.children[way].index(h.id_of("lane"))
    assert np.all(g[:, lane] == 0)
    num = numeric_grad(lambda: float(neuron_loss(z, tgt, head).data), z.data)
    assert np.all(num[:, lane] == 0)


def test_concept_map(concept_tree):
    b = concept_tree.binding("cityscape-like")
    lab = np.array([[0, IGNORE]])
    np.testing.assert_array_equal(concept_map(lab, b), [[b.label_to_concept[0], IGNORE]])

import numpy as np
import pytest

from semprop.hierarchy import load_hierarchy
from semprop.model import (ModelConfig, build_model, input_channels, neuron_forward, stem_forward,
                           transition_forward)
from semprop.tensor import ShapeError, Tensor, add, relu

from _trees import random_tree_doc
from conftest import tiny_config


def test_channel_formula_examples():
    cfg = ModelConfig()
    assert (cfg.m0, cfg.m) == (256, 48)
    assert input_channels(1, cfg) == 256
    assert input_channels(3, cfg) == 352
    assert input_channels(5, cfg) == 448
    with pytest.raises(ValueError):
        input_channels(0, cfg)


def test_variant_widths():
    assert input_channels(3, ModelConfig(aggregation="sum")) == 48
    assert input_channels(1, ModelConfig(propagation="parent_only")) == 256
    assert input_channels(4, ModelConfig(propagation="parent_only")) == 48


def test_bundled_tree_widths(concept_tree):
    model = build_model(concept_tree, ModelConfig(stem_channels=(8, 8, 8, 8, 8)))
    h = concept_tree
    for nid, p in model.neurons.items():
        assert p.conv1.weight.shape[1] == 256 + 48 * (h.neuron_depth(nid) - 1)
        assert p.head.weight.shape[0] == len(h.children[nid])
    entity = model.neurons[h.id_of("entity")]
    assert entity.conv1.weight.shape[1] == 256
    assert entity.head.weight.shape[0] == len(h.children[h.root]) == 5
    assert model.neurons[h.id_of("table")].conv1.weight.shape[1] == 352


def test_same_seed_identical(concept_tree):
    a = build_model(concept_tree, tiny_config(), seed=3).state_dict()
    b = build_model(concept_tree, tiny_config(), seed=3).state_dict()
    c = build_model(concept_tree, tiny_config(), seed=4).state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_parameter_count_closed_form(concept_tree):
    cfg = tiny_config()
    model = build_model(concept_tree, cfg)
    h = concept_tree
    stem, prev = 0, cfg.in_channels
    for wdt in cfg.stem_channels:
        stem += wdt * prev * 9 + wdt
        prev = wdt
    q = 3 * (cfg.m0 * prev * 9 + cfg.m0)
    width = cfg.bottleneck * cfg.m
    neurons = 0
    for n in h.neurons:
        d = h.neuron_depth(n)
        cin = cfg.m0 + cfg.m * (d - 1)
        neurons += width * cin + width + cfg.m * width * 9 + cfg.m + len(h.children[n]) * cfg.m + len(h.children[n])
    assert model.parameter_count() == stem + q + neurons


def test_degenerate_tree_rejected():
    h = load_hierarchy({"concepts": [{"name": "r", "parent": None}, {"name": "a", "parent": "r"}]})
    with pytest.raises(ValueError):
        build_model(h)


@pytest.mark.parametrize("size,out", [(64, 8), (8, 1)])
def test_stem_stride(size, out, concept_tree):
    model = build_model(concept_tree, tiny_config())
    y = stem_forward(model, Tensor(np.zeros((1, 3, size, size), np.float32)))
    assert y.shape[2:] == (out, out)


def test_stem_rejects_non_divisible(concept_tree):
    model = build_model(concept_tree, tiny_config())
    with pytest.raises(ShapeError, match="height/width"):
        stem_forward(model, Tensor(np.zeros((1, 3, 65, 64), np.float32)))


def test_transition(concept_tree, rng):
    cfg = ModelConfig(stem_channels=(4, 4, 4, 4, 4))
    model = build_model(concept_tree, cfg)
    x = Tensor(rng.standard_normal((1, 4, 6, 6)).astype(np.float32))
    h0 = transition_forward(model, x)
    assert h0.shape[1] == 256
    single = [branch(x) for branch in model.q]
    np.testing.assert_allclose(h0.data, relu(add(single)).data, rtol=1e-6)
    for conv in model.q:
        conv.weight.data = np.zeros_like(conv.weight.data)
        conv.bias.data = np.zeros_like(conv.bias.data)
    assert not transition_forward(model, x).data.any()


def test_neuron_input_count_and_width(concept_tree, rng):
    model = build_model(concept_tree, tiny_config())
    table = concept_tree.id_of("table")
    z = lambda c: Tensor(rng.standard_normal((1, c, 2, 2)).astype(np.float32))
    hid, logits = neuron_forward(model, table, [z(6), z(4), z(4)])
    assert hid.shape == (1, 4, 2, 2) and logits.shape == (1, 2, 2, 2)
    with pytest.raises(ShapeError, match="input count"):
        neuron_forward(model, table, [z(6)])
    with pytest.raises(ShapeError, match="channels"):
        neuron_forward(model, table, [z(6), z(4), z(5)])


def test_sum_mode_zero_case_matches_concat(concept_tree):
    h = concept_tree
    cat = build_model(h, tiny_config(), seed=0)
    summ = build_model(h, tiny_config(aggregation="sum"), seed=0)
    summ.q_proj.weight.data[...] = 0
    summ.q_proj.bias.data[...] = 0
    n = h.id_of("table")
    for part in ("conv2", "head"):
        getattr(summ.neurons[n], part).weight.data = getattr(cat.neurons[n], part).weight.data.copy()
        getattr(summ.neurons[n], part).bias.data = getattr(cat.neurons[n], part).bias.data.copy()
    summ.neurons[n].conv1.bias.data = cat.neurons[n].conv1.bias.data.copy()
    h0 = Tensor(np.random.default_rng(0).standard_normal((1, 6, 2, 2)).astype(np.float32))
    anc = Tensor(np.zeros((1, 4, 2, 2), np.float32))
    root_s = summ.q_proj(h0)
    a = neuron_forward(summ, n, [root_s, anc, anc])
    b = neuron_forward(cat, n, [Tensor(np.zeros_like(h0.data)), anc, anc])
    np.testing.assert_array_equal(a[1].data, b[1].data)


def test_state_dict_roundtrip(concept_tree):
    a = build_model(concept_tree, tiny_config(), seed=1)
    b = build_model(concept_tree, tiny_config(), seed=2)
    b.load_state_dict(a.state_dict())
    assert all(np.array_equal(v, b.state_dict()[k]) for k, v in a.state_dict().items())
    bad = a.state_dict()
    bad.pop(next(iter(bad)))
    with pytest.raises(KeyError):
        b.load_state_dict(bad)


@pytest.mark.parametrize("m", [32, 48, 64])
def test_random_tree_widths(m):
    rng = np.random.default_rng(m)
    for _ in range(5):
        h = load_hierarchy(random_tree_doc(rng, 16, max_depth=5, force_depth=True))
        model = build_model(h, ModelConfig(m=m, stem_channels=(4, 4, 4, 4, 4)))
        for nid, p in model.neurons.items():
            assert p.conv1.weight.shape[1] == 256 + m * (h.neuron_depth(nid) - 1)

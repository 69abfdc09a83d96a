import numpy as np

from semprop import gradcheck as G


def test_rel_error_normwise():
    assert G.rel_error(np.zeros(3), np.zeros(3)) == 0.0
    assert G.rel_error(np.array([1.0, 0.0]), np.array([1.0, 1e-6])) < 1e-5
    assert G.rel_error(np.array([1.0]), np.array([-1.0])) == 2.0


def test_numeric_grad_quadratic():
    x = np.array([1.0, -2.0, 3.0])
    g = G.numeric_grad(lambda: float((x ** 2).sum()), x)
    np.testing.assert_allclose(g, 2 * x, rtol=1e-8)
    np.testing.assert_array_equal(x, [1.0, -2.0, 3.0])


def test_detects_wrong_gradient():
    from semprop import tensor as T

    x = T.Tensor(np.random.default_rng(0).standard_normal((1, 1, 2, 2)), requires_grad=True)
    broken = lambda: T._emit(np.asarray(x.data.sum() * 2), [x], lambda g: (np.ones_like(x.data) * g,))
    res = G._check("broken", broken, {"x": x}, np.random.default_rng(0))
    assert not res[0].passed


def test_all_checks_pass():
    report = G.run_all(seed=3)
    names = {c["name"].split("[")[0].split(":")[0] for c in report["checks"]}
    assert {"conv2d", "relu", "sigmoid", "concat_channels", "dense_conv1x1", "bce_with_logits",
            "softmax_ce", "dsspn_loss", "take_samples", "add", "scale"} <= names
    assert report["passed"], [c for c in report["checks"] if not c["passed"]]

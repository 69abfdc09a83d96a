import numpy as np
import pytest

from semprop.optim import OptimState, poly_lr, sgd_step
from semprop.tensor import Tensor


def test_poly_lr_endpoints():
    assert poly_lr(0.003, 0, 100) == 0.003
    assert poly_lr(0.003, 99, 100) == pytest.approx(0.003 * (1 / 100) ** 0.9, rel=1e-12)
    lrs = [poly_lr(0.01, i, 50) for i in range(50)]
    assert all(a > b for a, b in zip(lrs, lrs[1:]))


def test_plain_step():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    st = OptimState(base_lr=0.1, momentum=0.0, weight_decay=0.0, max_iter=10)
    lr = sgd_step({"p": p}, {p: np.array([0.5, -1.0])}, st, 0)
    assert lr == 0.1
    np.testing.assert_allclose(p.data, [0.95, 2.1])


def test_momentum_and_weight_decay():
    p = Tensor(np.array([1.0]), requires_grad=True)
    st = OptimState(base_lr=0.1, momentum=0.9, weight_decay=0.01, power=1.0, max_iter=1000)
    g = np.array([1.0])
    sgd_step({"p": p}, {p: g}, st, 0)
    v1 = 1.0 + 0.01 * 1.0
    assert p.data[0] == pytest.approx(1.0 - 0.1 * v1)
    p_before = p.data[0]
    sgd_step({"p": p}, {p: g}, st, 1)
    v2 = 0.9 * v1 + 1.0 + 0.01 * p_before
    assert p.data[0] == pytest.approx(p_before - poly_lr(0.1, 1, 1000, 1.0) * v2)


def test_params_without_grads_untouched():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    st = OptimState(max_iter=5)
    sgd_step({"a": a, "b": b}, {a: np.ones(2)}, st, 0)
    np.testing.assert_array_equal(b.data, np.ones(2))
    assert "b" not in st.buffers


def test_iteration_bounds():
    p = Tensor(np.ones(1), requires_grad=True)
    with pytest.raises(ValueError):
        sgd_step({"p": p}, {p: np.ones(1)}, OptimState(max_iter=3), 3)

import numpy as np
import pytest

from aupretrain.errors import ConfigError, ShapeError
from aupretrain.optim import Adam, AdamState, adam_step
from aupretrain.tensor import Tensor

from oracles import textbook_adam


def test_zero_gradient_is_fixed_point():
    p = {"w": np.array([1.0, -2.0])}
    adam_step(p, {"w": np.zeros(2)}, AdamState(lr=0.1))
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


@pytest.mark.parametrize("g", [3.0, -0.02, 1e3])
def test_first_step_moves_by_lr(g):
    lr = 0.005
    p = {"w": np.zeros(4)}
    adam_step(p, {"w": np.full(4, g)}, AdamState(lr=lr))
    delta = -p["w"]
    assert np.all(np.abs(np.abs(delta) - lr) <= lr * 1e-3)
    assert np.all(np.sign(delta) == np.sign(g))


def test_ten_step_quadratic_matches_textbook():
    # f(x) = 0.5 * a * (x - c)^2
    a, c, x0, lr = 3.0, 1.5, -2.0, 0.05
    grad = lambda x: a * (x - c)  # noqa: E731
    expected = textbook_adam(x0, grad, 10, lr)
    p = {"x": np.array([x0])}
    state = AdamState(lr=lr)
    for t in range(10):
        adam_step(p, {"x": grad(p["x"])}, state)
        assert abs(p["x"][0] - expected[t]) < 1e-10
    assert state.step_count == 10


def test_step_count_and_moment_dims():
    params = {"a": np.zeros((2, 3)), "b": np.zeros(5)}
    state = AdamState()
    for k in range(3):
        adam_step(params, {"a": np.ones((2, 3)), "b": np.ones(5)}, state)
        assert state.step_count == k + 1
    for n, v in params.items():
        assert state.m[n].shape == v.shape and state.v[n].shape == v.shape


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step({"a": np.zeros(3)}, {"a": np.zeros(4)}, AdamState())
    state = AdamState()
    adam_step({"a": np.zeros(3)}, {"a": np.ones(3)}, state)
    with pytest.raises(ShapeError):
        adam_step({"a": np.zeros(2)}, {"a": np.ones(2)}, state)


def test_invalid_hyperparameters():
    for kw in ({"lr": -1.0}, {"beta1": 1.0}, {"beta2": 0.0}, {"eps": 0.0}):
        with pytest.raises(ConfigError):
            AdamState(**kw)


def test_none_gradient_leaves_parameter():
    p = {"a": np.ones(2), "b": np.ones(2)}
    adam_step(p, {"a": np.ones(2), "b": None}, AdamState(lr=0.1))
    np.testing.assert_array_equal(p["b"], [1.0, 1.0])
    assert "b" not in AdamState().m


def test_adam_wrapper_updates_tensors_in_place():
    w = Tensor(np.ones(3), requires_grad=True)
    opt = Adam({"w": w}, lr=0.01)
    w.grad = np.array([1.0, -1.0, 0.0])
    opt.step()
    np.testing.assert_allclose(w.data, [0.99, 1.01, 1.0])
    opt.zero_grad()
    assert w.grad is None


def test_zero_lr_is_identity():
    w = np.random.default_rng(0).normal(size=10).astype(np.float32)
    p = {"w": w.copy()}
    adam_step(p, {"w": np.ones(10, np.float32)}, AdamState(lr=0.0))
    assert np.array_equal(p["w"], w)

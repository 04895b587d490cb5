import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from d2lmat.errors import DimensionError, ValidationError
from d2lmat.ml_core import (
    EmaState,
    LinearParams,
    OptimizerState,
    adamw_step,
    ema_update,
    linear_backward,
    linear_forward,
    one_cycle_lr,
    sigmoid,
    warmup_decay,
)
from d2lmat.oracle import finite_diff_grad


def test_linear_identity():
    p = LinearParams(np.eye(2), np.zeros(2))
    np.testing.assert_array_equal(linear_forward(p, [[1.0, 2.0]]), [[1.0, 2.0]])


def test_linear_hand_product():
    p = LinearParams([[1.0], [1.0]], [0.5])
    np.testing.assert_allclose(linear_forward(p, [[1.0, 2.0]]), [[3.5]])


def test_linear_empty_rows():
    p = LinearParams(np.ones((3, 2)), np.zeros(2))
    assert linear_forward(p, np.zeros((0, 3))).shape == (0, 2)


def test_linear_shape_mismatch():
    p = LinearParams(np.ones((3, 2)), np.zeros(2))
    with pytest.raises(DimensionError):
        linear_forward(p, np.zeros((1, 4)))
    with pytest.raises(DimensionError):
        LinearParams(np.ones((3, 2)), np.zeros(3))


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31 - 1))
def test_linear_is_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    p = LinearParams(rng.normal(size=(4, 3)), np.zeros(3))
    x, y = rng.normal(size=(2, 5, 4))
    lhs = linear_forward(p, a * x + b * y)
    rhs = a * linear_forward(p, x) + b * linear_forward(p, y)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_linear_backward_matches_finite_differences(rng):
    p = LinearParams(rng.normal(size=(3, 2)), rng.normal(size=2))
    x = rng.normal(size=(4, 3))
    g = rng.normal(size=(4, 2))
    dx, dw, db = linear_backward(p, x, g)

    def f_w(w):
        return float((linear_forward(LinearParams(w, p.bias), x) * g).sum())

    np.testing.assert_allclose(dw, finite_diff_grad(f_w, p.weights), atol=1e-8)
    np.testing.assert_allclose(dx, finite_diff_grad(lambda xx: float((linear_forward(p, xx) * g).sum()), x),
                               atol=1e-8)
    np.testing.assert_allclose(db, g.sum(axis=0))


def test_sigmoid_values():
    assert sigmoid(np.array([0.0]))[0] == 0.5
    assert sigmoid(np.array([math.log(3.0)]))[0] == pytest.approx(0.75, abs=1e-15)
    with np.errstate(over="raise"):
        big = sigmoid(np.array([500.0, -500.0]))
    assert big[0] >= 1 - 1e-15
    assert 0.0 <= big[1] < 1e-200


@settings(max_examples=100, deadline=None)
@given(st.floats(-30, 30))
def test_sigmoid_symmetry_and_range(z):
    s = sigmoid(np.array([z, -z]))
    assert 0.0 < s[0] < 1.0 or abs(z) > 30
    assert abs(s[1] - (1.0 - s[0])) <= 1e-12


def test_sigmoid_monotone(rng):
    z = np.sort(rng.normal(scale=10, size=1000))
    assert np.all(np.diff(sigmoid(z)) >= 0)


def _params(rng):
    return {"w": rng.normal(size=(3, 2)), "b": rng.normal(size=2)}


def test_adamw_zero_grad_zero_decay_is_fixed_point(rng):
    params = _params(rng)
    state = OptimizerState.zeros_like(params, lr=1e-2, weight_decay=0.0)
    zeros = {k: np.zeros_like(v) for k, v in params.items()}
    for _ in range(3):
        state, new = adamw_step(state, params, zeros)
        for k in params:
            np.testing.assert_array_equal(new[k], params[k])
    assert state.step == 3


def test_adamw_single_step_closed_form():
    p = {"x": np.array([0.7, -1.3])}
    g = {"x": np.array([0.2, -3.0])}
    lr, wd, eps = 1e-3, 1e-2, 1e-8
    state = OptimizerState.zeros_like(p, lr=lr, weight_decay=wd, eps=eps)
    state, new = adamw_step(state, p, g)
    # fresh state: m_hat = g, v_hat = g^2
    expected = p["x"] - lr * g["x"] / (np.abs(g["x"]) + eps) - lr * wd * p["x"]
    np.testing.assert_allclose(new["x"], expected, rtol=1e-14)
    assert state.step == 1


def test_adamw_decoupled_decay_only():
    p = {"x": np.array([1.0])}
    state = OptimizerState.zeros_like(p, lr=1e-4, weight_decay=1e-4)
    _, new = adamw_step(state, p, {"x": np.array([0.0])})
    assert new["x"][0] == pytest.approx(1.0 - 1e-8, abs=1e-16)


def test_adamw_does_not_mutate(rng):
    params = _params(rng)
    before = {k: v.copy() for k, v in params.items()}
    state = OptimizerState.zeros_like(params, lr=0.1)
    adamw_step(state, params, _params(rng))
    for k in params:
        np.testing.assert_array_equal(params[k], before[k])
        assert not state.m[k].any()


def test_adamw_shape_mismatch(rng):
    params = _params(rng)
    state = OptimizerState.zeros_like(params)
    with pytest.raises(DimensionError):
        adamw_step(state, params, {"w": np.zeros((2, 2)), "b": np.zeros(2)})


def test_ema_one_step():
    ema = EmaState.from_params({"x": np.array([1.0])}, decay=0.9)
    ema = ema_update(ema, {"x": np.array([0.0])})
    assert ema.shadow["x"][0] == pytest.approx(0.9)


def test_ema_fixed_point():
    c = np.array([2.5, -1.0])
    ema = EmaState.from_params({"x": c}, decay=0.9997)
    for _ in range(10):
        ema = ema_update(ema, {"x": c})
    np.testing.assert_allclose(ema.shadow["x"], c, rtol=0, atol=1e-15)


@pytest.mark.parametrize("decay", [0.5, 0.9, 0.9997])
def test_ema_geometric_closed_form(decay):
    s0, p, T = 3.0, -0.5, 200
    ema = EmaState.from_params({"x": np.array([s0])}, decay=decay)
    for _ in range(T):
        ema = ema_update(ema, {"x": np.array([p])})
    assert abs(ema.shadow["x"][0] - (p + (s0 - p) * decay ** T)) < 1e-10


def test_ema_validation():
    with pytest.raises(ValidationError):
        EmaState.from_params({"x": np.zeros(1)}, decay=1.0)
    ema = EmaState.from_params({"x": np.zeros(1)})
    with pytest.raises(DimensionError):
        ema_update(ema, {"x": np.zeros(2)})


def test_one_cycle_shape():
    lrs = [one_cycle_lr(s, 100, 1e-2) for s in range(100)]
    peak = int(np.argmax(lrs))
    assert lrs[peak] == pytest.approx(1e-2)
    assert np.all(np.diff(lrs[:peak + 1]) > 0)
    assert np.all(np.diff(lrs[peak:]) <= 0)
    assert lrs[-1] == pytest.approx(1e-6)


def test_warmup_decay_caps():
    assert warmup_decay(0.9997, 0) == pytest.approx(0.1)
    assert warmup_decay(0.9997, 10**7) == 0.9997


def test_adamw_frozen_keys_untouched():
    params = {"a": np.ones(3), "b": np.ones(2)}
    grads = {"a": np.full(3, 0.5), "b": np.zeros(2)}
    state = OptimizerState.zeros_like(params, lr=0.1, weight_decay=0.1)
    new_state, new = adamw_step(state, params, grads, frozen=["b"])
    assert np.array_equal(new["b"], params["b"])
    assert np.array_equal(new_state.m["b"], state.m["b"])
    assert not np.array_equal(new["a"], params["a"])

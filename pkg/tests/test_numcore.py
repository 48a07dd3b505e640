import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mgpkad.numcore import (
    GRADCHECK_FLOOR,
    Adam,
    AdamState,
    DimensionError,
    Linear,
    Param,
    activation,
    adam_step,
    gradcheck,
    grad_enabled,
    linear_forward,
    make_rng,
    mlp,
    no_grad,
    sigmoid,
    silu,
    silu_grad,
    softplus,
    softplus_grad,
    step_decay_lr,
)

finite = st.floats(-700, 700, allow_nan=False, allow_infinity=False)


def test_make_rng_streams_are_independent_and_repeatable():
    a = make_rng(3, 1, 2).random(4)
    assert np.array_equal(a, make_rng(3, 1, 2).random(4))
    assert not np.array_equal(a, make_rng(3, 2, 1).random(4))
    assert not np.array_equal(a, make_rng(4, 1, 2).random(4))


def test_linear_forward_shape_errors():
    with pytest.raises(DimensionError):
        linear_forward(np.ones((2, 3)), np.ones((4, 2)), np.ones((1, 4)))
    with pytest.raises(DimensionError):
        linear_forward(np.ones((2, 3)), np.ones((4, 3)), np.ones((1, 3)))


def test_activation_reference_values():
    x = np.array([-2.0, 0.0, 1.5])
    ref_sig = 1.0 / (1.0 + np.exp(-x))
    np.testing.assert_allclose(sigmoid(x), ref_sig, rtol=1e-15, atol=1e-16)
    np.testing.assert_allclose(silu(x), x * ref_sig, rtol=1e-15, atol=1e-16)
    np.testing.assert_allclose(softplus(x), np.log1p(np.exp(x)), rtol=1e-14)
    assert softplus(np.array([0.0]))[0] == pytest.approx(math.log(2.0), rel=1e-15)
    with pytest.raises(ValueError):
        activation(x, "gelu")


def test_extreme_inputs_stay_finite():
    x = np.array([-1e4, -50.0, 50.0, 1e4])
    with np.errstate(over="raise", invalid="raise", divide="raise"):
        for f in (sigmoid, silu, silu_grad, softplus, softplus_grad):
            assert np.all(np.isfinite(f(x)))
    assert softplus(np.array([1e4]))[0] == 1e4
    assert softplus(np.array([-1e4]))[0] == 0.0


@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-30, 30)))
def test_activation_grads_match_central_difference(x):
    h = 1e-6
    for f, g in ((silu, silu_grad), (softplus, softplus_grad)):
        num = (f(x + h) - f(x - h)) / (2 * h)
        np.testing.assert_allclose(g(x), num, rtol=1e-6, atol=1e-7)


@given(arrays(np.float64, st.integers(1, 50), elements=finite))
def test_softplus_is_positive_and_bounds_relu(x):
    sp = softplus(x)
    assert np.all(sp >= 0.0)
    assert np.all(sp >= np.maximum(x, 0.0))
    assert np.all(sp <= np.maximum(x, 0.0) + math.log(2.0) + 1e-12)


@given(arrays(np.float64, st.integers(1, 50), elements=finite))
def test_sigmoid_is_symmetric_and_bounded(x):
    s = sigmoid(x)
    assert np.all((s >= 0.0) & (s <= 1.0))
    np.testing.assert_allclose(s + sigmoid(-x), 1.0, atol=1e-15)


def test_linear_backward_accumulates(rng):
    lin = Linear(3, 2, rng)
    x = rng.normal(size=(4, 3))
    g = rng.normal(size=(4, 2))
    lin.forward(x)
    gx = lin.backward(g)
    lin.forward(x)
    lin.backward(g)
    np.testing.assert_allclose(lin.w.grad, 2 * g.T @ x, rtol=1e-14)
    np.testing.assert_allclose(lin.b.grad, 2 * g.sum(0, keepdims=True), rtol=1e-14)
    np.testing.assert_allclose(gx, g @ lin.w.value, rtol=1e-14)


def test_mlp_gradcheck(rng):
    net = mlp([4, 6, 3], "silu", rng)
    x = rng.normal(size=(5, 4))
    rep = gradcheck(lambda: net.forward(x), net.backward, net.named_params())
    assert rep.passed, rep.location


def test_gradcheck_detects_a_wrong_gradient(rng):
    lin = Linear(3, 2, rng)
    x = rng.normal(size=(4, 3))

    def bad_backward(g):
        lin.backward(g)
        lin.w.grad *= 1.01

    rep = gradcheck(lambda: lin.forward(x), bad_backward, lin.named_params())
    assert not rep.passed
    assert rep.location.startswith("w")


def test_gradcheck_floor_only_affects_tiny_gradients():
    # a gradient of 1e-3 off by 1e-8 is a relative error of 1e-5 regardless of the floor
    assert GRADCHECK_FLOOR < 1e-3
    p = Param(np.array([[0.3]]))
    rep = gradcheck(lambda: 1e-3 * p.value, lambda g: p.grad.__iadd__(1e-3 * g * (1 + 1e-5)), [("p", p)])
    assert rep.max_rel_err == pytest.approx(1e-5, rel=1e-3)


def test_adam_first_step_oracle():
    # bias-corrected first step moves each entry by lr * g / (|g| + eps)
    p = Param(np.array([1.0, -2.0, 0.5]))
    p.grad[...] = [0.1, -4.0, 0.0]
    st_ = AdamState.like(p, lr=0.01)
    adam_step(p, st_)
    np.testing.assert_allclose(p.value, [0.99, -1.99, 0.5], rtol=0, atol=1e-9)
    assert st_.step == 1


def test_adam_second_step_frozen():
    p = Param(np.array([1.0]))
    opt = Adam([("p", p)], lr=0.1)
    for g in (2.0, -1.0):
        p.grad[...] = g
        opt.step()
    # m = 0.9*0.2 - 0.1 = 0.08 -> /0.19; v = 0.999*0.004 + 0.001 = 0.004996 -> /0.001999
    first = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8)
    m_hat = 0.08 / 0.19
    v_hat = 0.004996 / (1 - 0.999**2)
    expected = first - 0.1 * m_hat / (math.sqrt(v_hat) + 1e-8)
    assert p.value[0] == pytest.approx(expected, rel=1e-12)


def test_adam_shape_mismatch():
    p = Param(np.zeros(3))
    with pytest.raises(DimensionError):
        adam_step(p, AdamState(np.zeros(2), np.zeros(2)))


@pytest.mark.parametrize("step,expected", [(0, 1.0), (32, 1.0), (33, 0.5), (65, 0.5), (66, 0.25), (99, 0.25)])
def test_step_decay(step, expected):
    assert step_decay_lr(1.0, step, 100) == expected


def test_no_grad_is_scoped_and_restored():
    assert grad_enabled()
    with no_grad():
        assert not grad_enabled()
        with no_grad():
            assert not grad_enabled()
        assert not grad_enabled()
    assert grad_enabled()
    with pytest.raises(RuntimeError):
        with no_grad():
            raise RuntimeError("boom")
    assert grad_enabled()

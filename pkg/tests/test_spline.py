import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mgpkad import spline
from mgpkad.numcore import NumericalError
from mgpkad.spline import DegenerateRangeError, SplineGrid, uniform_grid

orders = st.integers(0, 4)
sizes = st.integers(1, 12)


def random_grid(seed, grid_size, order):
    rng = np.random.default_rng(seed)
    knots = np.cumsum(rng.uniform(0.05, 1.0, size=grid_size + 2 * order + 1))
    return SplineGrid(knots, grid_size, order)


def test_uniform_grid_layout():
    g = uniform_grid(-1.0, 1.0, 4, 3)
    np.testing.assert_allclose(g.knots, np.linspace(-2.5, 2.5, 11), atol=1e-15)
    assert g.num_basis == 7
    assert g.interior == (-1.0, 1.0)


def test_grid_validation():
    with pytest.raises(DegenerateRangeError):
        uniform_grid(1.0, 1.0, 4, 3)
    with pytest.raises(ValueError):
        SplineGrid(np.array([0.0, 1.0, 1.0, 2.0]), 3, 0)
    with pytest.raises(ValueError):
        SplineGrid(np.arange(5.0), 5, 3)


def scipy_basis(interpolate, g, x, nu=0):
    """Each basis function evaluated on its own support by scipy's reference implementation."""
    k = g.spline_order
    cols = []
    for i in range(g.num_basis):
        b = interpolate.BSpline.basis_element(g.knots[i : i + k + 2], extrapolate=False)
        v = b.derivative(nu)(x) if nu else b(x)
        cols.append(np.nan_to_num(v))
    return np.column_stack(cols)


def test_basis_matches_scipy_oracle():
    interpolate = pytest.importorskip("scipy.interpolate")
    for order in range(5):
        for g in (uniform_grid(-1.0, 1.0, 6, order), random_grid(order, 6, order)):
            x = np.random.default_rng(order).uniform(g.knots[0], g.knots[-1], 501)
            np.testing.assert_allclose(spline.basis(x, g), scipy_basis(interpolate, g, x), atol=1e-12)
            if order > 0:
                np.testing.assert_allclose(spline.basis_derivative(x, g), scipy_basis(interpolate, g, x, 1),
                                           atol=1e-9)


def test_order_one_hat_functions_frozen():
    g = uniform_grid(0.0, 1.0, 2, 1)  # knots -0.5, 0, 0.5, 1, 1.5
    B = spline.basis([0.25, 0.5, 0.8], g)
    np.testing.assert_allclose(B, [[0.5, 0.5, 0.0], [0.0, 1.0, 0.0], [0.0, 0.4, 0.6]], atol=1e-15)


@given(st.integers(0, 2**31), sizes, orders)
def test_partition_of_unity_on_interior(seed, grid_size, order):
    g = random_grid(seed, grid_size, order)
    lo, hi = g.interior
    x = np.random.default_rng(seed).uniform(lo, hi, 200)
    B = spline.basis(x, g)
    assert np.all(B >= -1e-15)
    np.testing.assert_allclose(B.sum(axis=1), 1.0, atol=1e-12)


@given(st.integers(0, 2**31), sizes, orders)
def test_local_support(seed, grid_size, order):
    g = random_grid(seed, grid_size, order)
    x = np.random.default_rng(seed).uniform(g.knots[0], g.knots[-1], 200)
    B = spline.basis(x, g)
    t = g.knots
    for i in range(g.num_basis):
        outside = (x < t[i]) | (x >= t[i + order + 1])
        assert np.all(B[outside, i] == 0.0)
    # at most order + 1 functions are non-zero anywhere
    assert np.all((B != 0).sum(axis=1) <= order + 1)


@given(st.integers(0, 2**31), st.integers(1, 8), st.integers(1, 4))
def test_derivative_sums_to_zero_on_interior(seed, grid_size, order):
    g = random_grid(seed, grid_size, order)
    lo, hi = g.interior
    x = np.random.default_rng(seed).uniform(lo, hi, 50)
    np.testing.assert_allclose(spline.basis_derivative(x, g).sum(axis=1), 0.0, atol=1e-9)


def test_clamped_inputs_have_zero_derivative():
    g = uniform_grid(-1.0, 1.0, 5, 3)
    x = np.array([-10.0, g.knots[0] - 1e-3, g.knots[-1] + 1e-3, 10.0])
    B, dB = spline.basis_and_derivative(x, g)
    assert np.all(dB == 0.0)
    np.testing.assert_array_equal(B[0], spline.basis([g.knots[0]], g)[0])


def test_fit_then_evaluate_reproduces_a_spline():
    g = uniform_grid(-1.0, 1.0, 8, 3)
    coef = np.random.default_rng(0).normal(size=g.num_basis)
    x = np.linspace(-1.0, 1.0, 400)
    y = spline.evaluate(x, g, coef)
    fitted = spline.fit_coefficients(x, y, g, damping=0.0)
    rms = np.sqrt(np.mean((spline.evaluate(x, g, fitted) - y) ** 2))
    assert rms < 1e-10


def test_fit_multiple_columns():
    g = uniform_grid(0.0, 2.0, 4, 2)
    x = np.linspace(0.0, 2.0, 100)
    Y = np.column_stack([np.sin(x), x**2])
    c = spline.fit_coefficients(x, Y, g)
    assert c.shape == (g.num_basis, 2)
    # a quadratic lies in the order-2 spline space
    np.testing.assert_allclose(spline.evaluate(x, g, c[:, 1]), x**2, atol=1e-6)


def test_fit_rejects_rank_deficient_systems():
    g = uniform_grid(0.0, 1.0, 5, 3)
    with pytest.raises(NumericalError):
        spline.fit_coefficients(np.linspace(0, 1, 4), np.zeros(4), g)
    with pytest.raises(NumericalError):
        spline.fit_coefficients(np.full(50, 0.5), np.zeros(50), g)

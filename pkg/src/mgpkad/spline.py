"""Uniform-knot B-spline grids, Cox-de Boor basis evaluation and coefficient fitting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _backend
from .numcore import NumericalError


class DegenerateRangeError(ValueError):
    """Input range has zero (or negative) width."""


@dataclass(frozen=True, eq=False)
class SplineGrid:
    """Knot vector of ``grid_size + 2 * spline_order + 1`` strictly increasing knots."""

    knots: np.ndarray
    grid_size: int
    spline_order: int

    def __post_init__(self):
        knots = np.ascontiguousarray(self.knots, dtype=np.float64)
        object.__setattr__(self, "knots", knots)
        if self.spline_order < 0 or self.grid_size < 1:
            raise ValueError("grid_size must be >= 1 and spline_order >= 0")
        if knots.shape != (self.grid_size + 2 * self.spline_order + 1,):
            raise ValueError(
                f"expected {self.grid_size + 2 * self.spline_order + 1} knots, got {knots.shape}"
            )
        if not np.all(np.diff(knots) > 0):
            raise ValueError("knots must be strictly increasing")

    @property
    def num_basis(self) -> int:
        return self.grid_size + self.spline_order

    @property
    def interior(self) -> tuple[float, float]:
        k = self.spline_order
        return float(self.knots[k]), float(self.knots[-1 - k])

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, SplineGrid)
            and self.grid_size == other.grid_size
            and self.spline_order == other.spline_order
            and np.array_equal(self.knots, other.knots)
        )


def uniform_grid(x_min: float, x_max: float, grid_size: int, spline_order: int) -> SplineGrid:
    if not x_max > x_min:
        raise DegenerateRangeError(f"degenerate range [{x_min}, {x_max}]")
    h = (x_max - x_min) / grid_size
    steps = np.arange(-spline_order, grid_size + spline_order + 1, dtype=np.float64)
    return SplineGrid(x_min + steps * h, grid_size, spline_order)


def basis(x, grid: SplineGrid) -> np.ndarray:
    """Basis matrix ``(len(x), grid.num_basis)``.

    Inputs outside ``[knots[0], knots[-1]]`` are clamped onto the boundary
    knots, so evaluation never fails.
    """
    x = np.ascontiguousarray(np.ravel(x), dtype=np.float64)
    return _backend.bspline_basis(x, grid.knots, grid.spline_order)


def basis_derivative(x, grid: SplineGrid) -> np.ndarray:
    """d/dx of every basis function; zero where ``x`` was clamped."""
    return basis_and_derivative(x, grid)[1]


def basis_and_derivative(x, grid: SplineGrid) -> tuple[np.ndarray, np.ndarray]:
    x = np.ascontiguousarray(np.ravel(x), dtype=np.float64)
    return _backend.bspline_basis_deriv(x, grid.knots, grid.spline_order)


def evaluate(x, grid: SplineGrid, coef: np.ndarray) -> np.ndarray:
    """Spline value(s) ``basis(x) @ coef``; ``coef`` may carry trailing output columns."""
    return basis(x, grid) @ coef


def fit_coefficients(samples_x, samples_y, grid: SplineGrid, damping: float = 1e-8, weights=None) -> np.ndarray:
    """Damped (optionally weighted) least-squares coefficients for ``basis(x) @ c ~= y``.

    ``samples_y`` may be 1-D or ``(n, m)`` for ``m`` functions sharing the grid.
    """
    x = np.ravel(samples_x)
    y = np.asarray(samples_y, dtype=np.float64)
    n = grid.num_basis
    if x.size < n:
        raise NumericalError(
            f"need at least {n} samples to fit {n} basis functions, got {x.size}"
        )
    if y.shape[0] != x.size:
        raise ValueError(f"samples_x has {x.size} entries but samples_y has {y.shape[0]}")
    B = basis(x, grid)
    if weights is None:
        BW = B.T
    else:
        w = np.ravel(np.asarray(weights, dtype=np.float64))
        if w.shape != x.shape or np.any(w < 0):
            raise ValueError("weights must be non-negative, one per sample")
        BW = B.T * w
    gram = BW @ B
    eig = np.linalg.eigvalsh(gram)
    if eig[-1] <= 0 or eig[0] < 1e-12 * eig[-1]:
        raise NumericalError(
            f"basis system is rank deficient (eigenvalue ratio {eig[0] / max(eig[-1], 1e-300):.3g})"
        )
    gram[np.diag_indices(n)] += damping
    return np.linalg.solve(gram, BW @ y)

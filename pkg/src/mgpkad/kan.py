"""KANLinear layers, the shrinking KAN decoder stack and dynamic grid adaptation.

A KANLinear layer computes ``silu(x) @ W_base.T + B(u) @ (scaler * W_spline).T``
where ``B(u)`` stacks the B-spline basis of every input channel and
``u = in_scale * x + in_shift`` maps each channel onto the layer's shared knot
grid.  The affine map is not trained; it is reset whenever the grid adapts.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import spline
from .numcore import (
    DimensionError,
    Module,
    Param,
    StateError,
    as_tensor2,
    grad_enabled,
    kaiming_uniform,
    silu,
    silu_grad,
)
from .spline import DegenerateRangeError, SplineGrid


class KANLinear(Module):
    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        grid_size: int = 5,
        spline_order: int = 3,
        grid_range: tuple[float, float] = (-1.0, 1.0),
        rng: np.random.Generator | None = None,
        bias: bool = False,
        name: str = "kan",
    ):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.grid = spline.uniform_grid(grid_range[0], grid_range[1], grid_size, spline_order)
        n = self.grid.num_basis
        if rng is not None:
            w_base = kaiming_uniform(rng, out_dim, in_dim)
            w_spline = rng.normal(0.0, 0.1 / grid_size, size=(out_dim, in_dim, n))
        else:
            w_base = np.zeros((out_dim, in_dim))
            w_spline = np.zeros((out_dim, in_dim, n))
        self.w_base = Param(w_base, f"{name}.w_base")
        self.w_spline = Param(w_spline, f"{name}.w_spline")
        self.spline_scaler = Param(np.ones((out_dim, in_dim)), f"{name}.spline_scaler")
        self.bias = Param(np.zeros((1, out_dim)), f"{name}.bias") if bias else None
        self.in_scale = np.ones(in_dim)
        self.in_shift = np.zeros(in_dim)
        self._cache: tuple | None = None

    @property
    def grid_size(self) -> int:
        return self.grid.grid_size

    @property
    def spline_order(self) -> int:
        return self.grid.spline_order

    def named_params(self, prefix: str = "") -> list[tuple[str, Param]]:
        out = [
            (prefix + "w_base", self.w_base),
            (prefix + "w_spline", self.w_spline),
            (prefix + "spline_scaler", self.spline_scaler),
        ]
        if self.bias is not None:
            out.append((prefix + "bias", self.bias))
        return out

    def effective_spline_weight(self) -> np.ndarray:
        return self.w_spline.value * self.spline_scaler.value[..., None]

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return x * self.in_scale + self.in_shift

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = as_tensor2(x, "x")
        if x.shape[1] != self.in_dim:
            raise DimensionError(f"KANLinear expects {self.in_dim} input channels, got shape {x.shape}")
        b = x.shape[0]
        u = self.normalize(x)
        if grad_enabled():
            basis, d_basis = spline.basis_and_derivative(u, self.grid)
        else:
            basis, d_basis = spline.basis(u, self.grid), None
        basis = basis.reshape(b, -1)
        act = silu(x)
        w_eff = self.effective_spline_weight().reshape(self.out_dim, -1)
        out = act @ self.w_base.value.T + basis @ w_eff.T
        if self.bias is not None:
            out += self.bias.value
        self._cache = (x, basis, d_basis, act)
        return out

    def backward(self, gy: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise StateError("KANLinear.backward called before forward")
        x, basis, d_basis, act = self._cache
        if d_basis is None:
            raise StateError("KANLinear.backward after a forward pass run under no_grad")
        b, n = x.shape[0], self.grid.num_basis
        self.w_base.grad += gy.T @ act
        g_eff = (gy.T @ basis).reshape(self.out_dim, self.in_dim, n)
        self.w_spline.grad += g_eff * self.spline_scaler.value[..., None]
        self.spline_scaler.grad += (g_eff * self.w_spline.value).sum(axis=-1)
        if self.bias is not None:
            self.bias.grad += gy.sum(axis=0, keepdims=True)
        w_eff = self.effective_spline_weight()
        g_basis = (gy @ w_eff.reshape(self.out_dim, -1)).reshape(b, self.in_dim, n)
        d_basis = d_basis.reshape(b, self.in_dim, n)
        gx = (gy @ self.w_base.value) * silu_grad(x)
        gx += (g_basis * d_basis).sum(axis=-1) * self.in_scale
        return gx

    def edge_values(self, x: np.ndarray) -> np.ndarray:
        """Spline term of every edge, shape ``(B, in_dim, out_dim)``."""
        x = as_tensor2(x, "x")
        b, n = x.shape[0], self.grid.num_basis
        basis = spline.basis(self.normalize(x), self.grid).reshape(b, self.in_dim, n)
        return np.einsum("bin,oin->bio", basis, self.effective_spline_weight())


def sample_quantiles(sorted_values: np.ndarray, count: int) -> np.ndarray:
    """``count`` evenly spaced quantiles (0 through 1) of already-sorted data, linearly interpolated."""
    n = sorted_values.size
    pos = np.linspace(0.0, n - 1, count)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n - 1)
    frac = pos - lo
    return sorted_values[lo] * (1.0 - frac) + sorted_values[hi] * frac


def blended_grid(values, grid_size: int, spline_order: int, eps: float) -> SplineGrid:
    """Blend of the quantile grid and the uniform grid of ``values``, extended uniformly by ``spline_order`` knots."""
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"eps must lie in [0, 1], got {eps}")
    v = np.ravel(np.asarray(values, dtype=np.float64))
    x_min, x_max = float(v.min()), float(v.max())
    if not x_max > x_min:
        raise DegenerateRangeError(f"all adaptation inputs equal {x_min}")
    h = (x_max - x_min) / grid_size
    k = spline_order
    uniform = spline.uniform_grid(x_min, x_max, grid_size, k).knots
    adaptive = sample_quantiles(np.sort(v), grid_size + 1)
    interior = (1.0 - eps) * adaptive + eps * uniform[k : k + grid_size + 1]
    knots = np.concatenate([
        interior[0] - h * np.arange(k, 0, -1),
        interior,
        interior[-1] + h * np.arange(1, k + 1),
    ])
    for i in range(1, knots.size):
        if knots[i] <= knots[i - 1]:
            knots[i] = knots[i - 1] + 1e-9
    return SplineGrid(knots, grid_size, k)


NORMALIZE_MODES = ("none", "range")
ANCHORS_PER_BASIS = 4
ANCHOR_WEIGHT = 1e-2


def adapt_grid(layer: KANLinear, batch_inputs: np.ndarray, eps: float = 0.02, refit: bool = True,
               normalize: str = "none") -> KANLinear:
    """Move ``layer``'s knots to the distribution of ``batch_inputs`` (in place).

    The shared grid is built from the pooled batch values.  With
    ``normalize="range"`` each channel is first stretched affinely onto the
    pooled batch range; ``"none"`` leaves channels as they are.  With
    ``refit`` the spline weights are re-solved so the layer keeps computing
    (nearly) the same function.  The least-squares targets are the old edge
    values on the batch plus evenly spaced anchor points across the new
    grid span, which keeps every channel's fit well posed even when its
    batch values cover only a few knot intervals.
    """
    if normalize not in NORMALIZE_MODES:
        raise ValueError(f"normalize must be one of {NORMALIZE_MODES}, got {normalize!r}")
    x = as_tensor2(batch_inputs, "batch_inputs")
    if x.shape[1] != layer.in_dim:
        raise DimensionError(f"layer has {layer.in_dim} inputs, batch has shape {x.shape}")
    if x.shape[0] < layer.grid_size + 1:
        raise ValueError(f"need at least {layer.grid_size + 1} rows to adapt, got {x.shape[0]}")
    lo, hi = float(x.min()), float(x.max())
    if not hi > lo:
        raise DegenerateRangeError(f"all adaptation inputs equal {lo}")

    if normalize == "range":
        cmin, cmax = x.min(axis=0), x.max(axis=0)
        width = cmax - cmin
        ok = width > 0
        scale = np.where(ok, (hi - lo) / np.where(ok, width, 1.0), 1.0)
        shift = np.where(ok, lo - scale * cmin, 0.0)
    else:
        scale, shift = np.ones(layer.in_dim), np.zeros(layer.in_dim)
    u = x * scale + shift
    grid = blended_grid(u, layer.grid_size, layer.spline_order, eps)

    if refit:
        ua = np.linspace(grid.knots[0], grid.knots[-1], ANCHORS_PER_BASIS * grid.num_basis)
        old_batch = layer.edge_values(x)
        old_anchor = layer.edge_values((ua[:, None] - shift) / scale)
    layer.grid = grid
    layer.in_scale, layer.in_shift = scale, shift
    layer._cache = None
    if refit:
        weights = np.concatenate([np.ones(len(u)), np.full(len(ua), ANCHOR_WEIGHT)])
        w_eff = np.empty_like(layer.w_spline.value)
        for j in range(layer.in_dim):
            w_eff[:, j, :] = spline.fit_coefficients(
                np.concatenate([u[:, j], ua]), np.concatenate([old_batch[:, j, :], old_anchor[:, j, :]]), grid,
                weights=weights).T
        scaler = layer.spline_scaler.value
        tiny = np.abs(scaler) < 1e-12
        if tiny.any():
            scaler[tiny] = 1.0
        layer.w_spline.value[...] = w_eff / scaler[..., None]
    return layer


def validate_schedule(dims: Sequence[int]) -> list[int]:
    dims = [int(d) for d in dims]
    if len(dims) < 2 or dims[-1] != 1:
        raise DimensionError(f"decoder schedule must end in width 1, got {dims}")
    if any(b >= a for a, b in zip(dims[:-1], dims[1:])):
        raise DimensionError(f"decoder schedule widths must strictly decrease, got {dims}")
    return dims


class KANStack(Module):
    """Sequential KANLinear layers following a shrinking width schedule ending in 1."""

    def __init__(
        self,
        dims: Sequence[int],
        grid_size: int = 5,
        spline_order: int = 3,
        rng: np.random.Generator | None = None,
        output_bias: bool = True,
        grid_range: tuple[float, float] = (-1.0, 1.0),
    ):
        self.dims = validate_schedule(dims)
        self.layers = [
            KANLinear(a, b, grid_size, spline_order, grid_range, rng,
                      bias=output_bias and i == len(self.dims) - 2, name=f"kan{i}")
            for i, (a, b) in enumerate(zip(self.dims[:-1], self.dims[1:]))
        ]

    def named_params(self, prefix: str = "") -> list[tuple[str, Param]]:
        out = []
        for i, layer in enumerate(self.layers):
            out.extend(layer.named_params(f"{prefix}{i}."))
        return out

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = as_tensor2(x, "x")
        if x.shape[1] != self.dims[0]:
            raise DimensionError(f"KAN stack expects width {self.dims[0]}, got shape {x.shape}")
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, gy: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            gy = layer.backward(gy)
        return gy

    def adapt(self, x: np.ndarray, eps: float = 0.02, refit: bool = True, normalize: str = "none") -> None:
        """Adapt every layer in turn, feeding each the (post-adaptation) output of the previous one."""
        for layer in self.layers:
            adapt_grid(layer, x, eps, refit, normalize)
            x = layer.forward(x)

    def grid_state(self) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
        return [(l.grid.knots.copy(), l.in_scale.copy(), l.in_shift.copy()) for l in self.layers]

    def load_grid_state(self, state) -> None:
        for layer, (knots, scale, shift) in zip(self.layers, state):
            layer.grid = SplineGrid(knots, layer.grid_size, layer.spline_order)
            layer.in_scale = np.asarray(scale, dtype=np.float64).copy()
            layer.in_shift = np.asarray(shift, dtype=np.float64).copy()

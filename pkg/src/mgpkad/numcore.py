"""Dense float64 tensor math, layers with hand-derived backward passes, Adam and gradcheck.

Every layer follows the same contract: ``forward(x)`` caches whatever the
backward pass needs and returns the output; ``backward(gy)`` accumulates
parameter gradients additively into ``Param.grad`` and returns the gradient
with respect to the layer input.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class StateError(RuntimeError):
    """An operation was called in the wrong order (e.g. backward before forward)."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite values or is too ill-conditioned to trust."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Within this block forward passes skip work only needed for a backward pass."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Deterministic generator for ``seed`` and an optional sub-stream path."""
    return np.random.default_rng([int(seed), *map(int, stream)])


def as_tensor2(a, name: str = "tensor") -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``x @ w.T + b`` for ``x`` (B, I), ``w`` (O, I), ``b`` (1, O)."""
    x = as_tensor2(x, "x")
    w = as_tensor2(w, "w")
    b = as_tensor2(b, "b")
    if x.shape[1] != w.shape[1] or b.shape != (1, w.shape[0]):
        raise DimensionError(
            f"linear shapes do not conform: x {x.shape}, w {w.shape}, b {b.shape}"
        )
    return x @ w.T + b


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 + 0.5 * np.tanh(0.5 * np.asarray(x, dtype=np.float64))


def silu(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(x)


def silu_grad(x: np.ndarray) -> np.ndarray:
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def softplus(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)
    big = np.abs(x) > 30.0
    if big.any():
        xb = x[big]
        out[big] = np.where(xb > 0, xb, np.exp(np.minimum(xb, 0.0)))
    return out


def softplus_grad(x: np.ndarray) -> np.ndarray:
    return sigmoid(x)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_grad(x: np.ndarray) -> np.ndarray:
    return (x > 0).astype(np.float64)


_ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    "silu": (silu, silu_grad),
    "softplus": (softplus, softplus_grad),
    "relu": (relu, relu_grad),
}


def activation(x: np.ndarray, kind: str) -> np.ndarray:
    try:
        fn, _ = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# Parameters and layers


class Param:
    """A value tensor paired with its gradient accumulator."""

    __slots__ = ("value", "grad", "name")

    def __init__(self, value: np.ndarray, name: str = ""):
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.value.shape})"


class Module:
    """Base class: subclasses list their parameters in ``named_params``."""

    def named_params(self, prefix: str = "") -> list[tuple[str, Param]]:
        return []

    def params(self) -> list[Param]:
        return [p for _, p in self.named_params()]

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    def num_params(self) -> int:
        return int(sum(p.value.size for p in self.params()))


def xavier_uniform(rng: np.random.Generator, fan_out: int, fan_in: int, gain: float = 1.0) -> np.ndarray:
    bound = gain * math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


def kaiming_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    # leaky-relu gain with a=sqrt(5), the usual default for linear layers
    bound = math.sqrt(6.0 / ((1.0 + 5.0) * fan_in))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None, name: str = "linear"):
        self.in_dim, self.out_dim = in_dim, out_dim
        w = xavier_uniform(rng, out_dim, in_dim) if rng is not None else np.zeros((out_dim, in_dim))
        self.w = Param(w, f"{name}.w")
        self.b = Param(np.zeros((1, out_dim)), f"{name}.b")
        self._x: np.ndarray | None = None

    def named_params(self, prefix: str = "") -> list[tuple[str, Param]]:
        return [(prefix + "w", self.w), (prefix + "b", self.b)]

    def forward(self, x: np.ndarray) -> np.ndarray:
        out = linear_forward(x, self.w.value, self.b.value)
        self._x = as_tensor2(x)
        return out

    def backward(self, gy: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise StateError("Linear.backward called before forward")
        self.w.grad += gy.T @ self._x
        self.b.grad += gy.sum(axis=0, keepdims=True)
        return gy @ self.w.value


class Activation(Module):
    def __init__(self, kind: str):
        if kind not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {kind!r}")
        self.kind = kind
        self._x: np.ndarray | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return _ACTIVATIONS[self.kind][0](x)

    def backward(self, gy: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise StateError(f"{self.kind} backward called before forward")
        return gy * _ACTIVATIONS[self.kind][1](self._x)


class Sequential(Module):
    def __init__(self, layers: Sequence[Module]):
        self.layers = list(layers)

    def named_params(self, prefix: str = "") -> list[tuple[str, Param]]:
        out = []
        for i, layer in enumerate(self.layers):
            out.extend(layer.named_params(f"{prefix}{i}."))
        return out

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, gy: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            gy = layer.backward(gy)
        return gy


def mlp(dims: Sequence[int], act: str, rng: np.random.Generator | None, name: str = "mlp") -> Sequential:
    """Linear layers of the given widths with ``act`` between them (none after the last)."""
    layers: list[Module] = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        if i:
            layers.append(Activation(act))
        layers.append(Linear(a, b, rng, name=f"{name}.{i}"))
    return Sequential(layers)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, param: Param, **kw) -> "AdamState":
        return cls(np.zeros_like(param.value), np.zeros_like(param.value), **kw)


def adam_step(param: Param, state: AdamState) -> Param:
    """One bias-corrected Adam update in place. The gradient is left untouched."""
    if state.m.shape != param.value.shape or state.v.shape != param.value.shape:
        raise DimensionError(
            f"Adam state shape {state.m.shape} does not match parameter {param.value.shape}"
        )
    g = param.grad
    state.step += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    param.value -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return param


def step_decay_lr(base_lr: float, step: int, total_steps: int, factor: float = 0.5) -> float:
    """Halve the learning rate after each third of the run."""
    if total_steps <= 0:
        return base_lr
    third = max(total_steps // 3, 1)
    return base_lr * factor ** min(step // third, 2)


class Adam:
    """Adam over a fixed, ordered list of named parameters."""

    def __init__(self, named: Iterable[tuple[str, Param]], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.named = list(named)
        self.states = [AdamState.like(p, lr=lr, beta1=beta1, beta2=beta2, eps=eps) for _, p in self.named]

    def set_lr(self, lr: float) -> None:
        for s in self.states:
            s.lr = lr

    def step(self) -> None:
        for (_, p), s in zip(self.named, self.states):
            adam_step(p, s)

    def zero_grad(self) -> None:
        for _, p in self.named:
            p.zero_grad()


# ---------------------------------------------------------------------------
# Gradient checking


# Below this magnitude the relative error is measured against the floor instead:
# a central difference at h=1e-5 carries roundoff near 1e-11 on O(1) outputs.
GRADCHECK_FLOOR = 1e-6


@dataclass
class GradcheckReport:
    max_rel_err: float
    passed: bool
    location: str = ""
    n_checked: int = 0
    per_param: dict[str, float] = field(default_factory=dict)


def gradcheck(
    forward: Callable[[], np.ndarray],
    backward: Callable[[np.ndarray], object],
    params: Sequence[tuple[str, Param]],
    h: float = 1e-5,
    tol: float = 1e-4,
    seed: int = 0,
    max_entries: int | None = None,
) -> GradcheckReport:
    """Compare analytic gradients with central differences.

    The scalar checked is ``sum(forward() * R)`` for a fixed random ``R``;
    its central difference is formed from the elementwise output difference.
    ``backward(R)`` must accumulate gradients into every param in ``params``.
    With ``max_entries`` set, at most that many entries per parameter (chosen
    deterministically from ``seed``) are perturbed.
    """
    rng = make_rng(seed, 7)
    y0 = np.asarray(forward(), dtype=np.float64)
    proj = rng.standard_normal(y0.shape)
    for _, p in params:
        p.zero_grad()
    forward()
    backward(proj)
    analytic = {name: p.grad.copy() for name, p in params}

    worst, where, count = 0.0, "", 0
    per_param: dict[str, float] = {}
    for name, p in params:
        a_all = analytic[name]
        if not np.all(np.isfinite(a_all)):
            bad = np.argwhere(~np.isfinite(a_all))[0]
            return GradcheckReport(math.inf, False, f"{name}{tuple(bad)} non-finite analytic grad", count, per_param)
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        pmax = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            yp = np.array(forward(), dtype=np.float64)
            flat[i] = orig - h
            ym = np.asarray(forward(), dtype=np.float64)
            flat[i] = orig
            # difference before projecting: untouched outputs cancel exactly
            num = float(np.sum((yp - ym) * proj)) / (2.0 * h)
            a = float(a_all.reshape(-1)[i])
            rel = abs(a - num) / max(abs(a), abs(num), GRADCHECK_FLOOR)
            count += 1
            pmax = max(pmax, rel)
            if rel > worst:
                worst = rel
                where = f"{name}[{np.unravel_index(i, p.value.shape)}] analytic={a:.6g} numeric={num:.6g}"
        per_param[name] = pmax
    return GradcheckReport(worst, worst < tol, where, count, per_param)

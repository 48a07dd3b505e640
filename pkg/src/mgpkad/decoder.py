"""Implicit SDF decoder: positional encoding, skip-connected front-end and a KAN (or ablation) head."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .kan import KANStack, validate_schedule
from .numcore import (
    DimensionError,
    Linear,
    Module,
    Param,
    StateError,
    as_tensor2,
    make_rng,
    mlp,
    softplus,
    softplus_grad,
)

HEAD_KINDS = ("kan", "linear", "mlp")
OUTPUT_BIAS = -1.0
OUTPUT_STD = 1e-4


def positional_encode(points: np.ndarray, n_freqs: int = 6) -> np.ndarray:
    """``[p, sin(2^l pi p), cos(2^l pi p)]`` for ``l < n_freqs``; width ``3 + 6 n_freqs``."""
    p = as_tensor2(points, "points")
    if p.shape[1] != 3:
        raise DimensionError(f"points must have 3 columns, got {p.shape}")
    cols = [p]
    for l in range(n_freqs):
        a = (2.0 ** l) * np.pi * p
        cols.append(np.sin(a))
        cols.append(np.cos(a))
    return np.concatenate(cols, axis=1)


def encoding_width(n_freqs: int) -> int:
    return 3 + 6 * n_freqs


def _small_output(layer, rng: np.random.Generator) -> None:
    """Near-zero weights and a -1 bias: the decoder starts out predicting 'outside by 1'."""
    layer.w.value[...] = rng.normal(0.0, OUTPUT_STD, size=layer.w.shape)
    layer.b.value[...] = OUTPUT_BIAS


def _segment_sum(g: np.ndarray, onehot: np.ndarray | None) -> np.ndarray:
    return g if onehot is None else onehot @ g


class FrontEnd(Module):
    """Three linear layers with softplus between them; the raw input is re-injected at the middle layer.

    The input is split into per-row positional columns and per-instance
    feature columns.  Feature contributions to the first two layers are
    computed once per instance and broadcast through ``index``.
    """

    def __init__(self, pos_dim: int, feat_dim: int, hidden: Sequence[int], out_dim: int,
                 rng: np.random.Generator | None = None):
        h0, h1 = hidden
        self.pos_dim, self.feat_dim = pos_dim, feat_dim
        self.in_dim, self.out_dim = pos_dim + feat_dim, out_dim
        self.l0 = Linear(self.in_dim, h0, rng, "front.0")
        self.l1 = Linear(h0 + self.in_dim, h1, rng, "front.1")
        self.l2 = Linear(h1, out_dim, rng, "front.2")
        self._cache = None

    def named_params(self, prefix: str = "") -> list[tuple[str, Param]]:
        return self.l0.named_params(prefix + "0.") + self.l1.named_params(prefix + "1.") + self.l2.named_params(prefix + "2.")

    def forward(self, pos: np.ndarray, feat: np.ndarray, index: np.ndarray | None = None) -> np.ndarray:
        pos, feat = as_tensor2(pos, "pos"), as_tensor2(feat, "feat")
        if pos.shape[1] != self.pos_dim or feat.shape[1] != self.feat_dim:
            raise DimensionError(f"front-end expects {self.pos_dim} positional + {self.feat_dim} feature columns, "
                                 f"got {pos.shape[1]} + {feat.shape[1]}")
        b, g = pos.shape[0], feat.shape[0]
        if index is None:
            if g != b:
                raise DimensionError(f"{b} query rows but {g} feature rows and no index")
            onehot = None
        else:
            index = np.asarray(index, dtype=np.int64)
            if index.shape != (b,) or index.min() < 0 or index.max() >= g:
                raise DimensionError(f"index must map {b} rows into [0, {g})")
            onehot = (np.arange(g)[:, None] == index[None, :]).astype(np.float64)
        p, h0 = self.pos_dim, self.l0.out_dim
        w0, w1 = self.l0.w.value, self.l1.w.value
        c0 = feat @ w0[:, p:].T + self.l0.b.value
        c1 = feat @ w1[:, h0 + p :].T + self.l1.b.value
        if index is not None and g > 1:
            c0, c1 = c0[index], c1[index]
        a0 = pos @ w0[:, :p].T + c0
        z0 = softplus(a0)
        a1 = z0 @ w1[:, :h0].T + pos @ w1[:, h0 : h0 + p].T + c1
        z1 = softplus(a1)
        self._cache = (pos, feat, onehot, a0, z0, a1, z1)
        return z1 @ self.l2.w.value.T + self.l2.b.value

    def backward(self, g: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients; return the gradient for the feature rows."""
        if self._cache is None:
            raise StateError("FrontEnd.backward called before forward")
        pos, feat, onehot, a0, z0, a1, z1 = self._cache
        p, h0 = self.pos_dim, self.l0.out_dim
        w0, w1 = self.l0.w.value, self.l1.w.value
        self.l2.w.grad += g.T @ z1
        self.l2.b.grad += g.sum(axis=0, keepdims=True)
        g1 = (g @ self.l2.w.value) * softplus_grad(a1)
        s1 = _segment_sum(g1, onehot)
        self.l1.w.grad[:, :h0] += g1.T @ z0
        self.l1.w.grad[:, h0 : h0 + p] += g1.T @ pos
        self.l1.w.grad[:, h0 + p :] += s1.T @ feat
        self.l1.b.grad += s1.sum(axis=0, keepdims=True)
        g0 = (g1 @ w1[:, :h0]) * softplus_grad(a0)
        s0 = _segment_sum(g0, onehot)
        self.l0.w.grad[:, :p] += g0.T @ pos
        self.l0.w.grad[:, p:] += s0.T @ feat
        self.l0.b.grad += s0.sum(axis=0, keepdims=True)
        return s0 @ w0[:, p:] + s1 @ w1[:, h0 + p :]


def init_frontend(seed: int, pos_dim: int, feat_dim: int, hidden: Sequence[int] = (256, 256),
                  out_dim: int = 128) -> FrontEnd:
    """Xavier init with doubled gain on the positional columns, halved skip columns and a -1 output bias."""
    rng = make_rng(seed, 23)
    fe = FrontEnd(pos_dim, feat_dim, hidden, out_dim, rng)
    fe.l0.w.value[:, :pos_dim] *= 2.0
    fe.l1.w.value[:, hidden[0]:] *= 0.5
    _small_output(fe.l2, rng)
    return fe


def head_param_count(kind: str, dims: Sequence[int], grid_size: int = 5, spline_order: int = 3) -> int:
    dims = list(dims)
    pairs = list(zip(dims[:-1], dims[1:]))
    if kind == "kan":
        n = grid_size + spline_order
        return sum(o * i * (n + 2) for i, o in pairs) + dims[-1]
    if kind == "mlp":
        return sum(o * i + o for i, o in pairs)
    if kind == "linear":
        return dims[0] + 1
    raise ValueError(f"unknown head kind {kind!r}")


def matched_mlp_dims(kan_dims: Sequence[int], grid_size: int = 5, spline_order: int = 3) -> list[int]:
    """Scale the KAN hidden widths uniformly so a ReLU MLP of the same depth matches its parameter count."""
    kan_dims = validate_schedule(kan_dims)
    target = head_param_count("kan", kan_dims, grid_size, spline_order)
    best, best_err = None, np.inf
    for s in np.arange(0.5, 20.0, 0.005):
        dims = [kan_dims[0]] + [max(1, int(round(d * s))) for d in kan_dims[1:-1]] + [1]
        err = abs(head_param_count("mlp", dims) - target)
        if err < best_err:
            best, best_err = dims, err
    return best


class Decoder(Module):
    """Maps ``(points, f_img rows, f_geo rows)`` to one SDF value per row."""

    def __init__(self, d_img: int, d_geo: int, kan_dims: Sequence[int], hidden: Sequence[int] = (256, 256),
                 n_freqs: int = 6, head: str = "kan", use_geo: bool = True, grid_size: int = 5,
                 spline_order: int = 3, seed: int = 0):
        if head not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {head!r}; expected one of {HEAD_KINDS}")
        kan_dims = validate_schedule(kan_dims)
        self.d_img, self.d_geo, self.n_freqs = d_img, d_geo, n_freqs
        self.use_geo, self.head_kind = use_geo, head
        self.pos_dim = encoding_width(n_freqs)
        self.feat_dim = d_img + (d_geo if use_geo else 0)
        self.in_dim = self.pos_dim + self.feat_dim
        self.front = init_frontend(seed, self.pos_dim, self.feat_dim, hidden, kan_dims[0])
        rng = make_rng(seed, 29)
        if head == "kan":
            self.head = KANStack(kan_dims, grid_size, spline_order, rng, output_bias=True)
            last = self.head.layers[-1]
            last.w_base.value[...] = rng.normal(0.0, OUTPUT_STD, size=last.w_base.shape)
            last.w_spline.value[...] = rng.normal(0.0, OUTPUT_STD, size=last.w_spline.shape)
            last.bias.value[...] = OUTPUT_BIAS
        elif head == "linear":
            self.head = Linear(kan_dims[0], 1, rng, "head")
            _small_output(self.head, rng)
        else:
            self.head = mlp(matched_mlp_dims(kan_dims, grid_size, spline_order), "relu", rng, "head")
            _small_output(self.head.layers[-1], rng)
        self._head_input: np.ndarray | None = None

    def named_params(self, prefix: str = "") -> list[tuple[str, Param]]:
        return self.front.named_params(prefix + "front.") + self.head.named_params(prefix + "head.")

    def head_params(self) -> int:
        return sum(p.value.size for _, p in self.head.named_params())

    def _features(self, f_img, f_geo) -> np.ndarray:
        f_img = as_tensor2(f_img, "f_img")
        if f_img.shape[1] != self.d_img:
            raise DimensionError(f"decoder input layout is [pos_enc {self.pos_dim} | f_img {self.d_img}"
                                 f"{f' | f_geo {self.d_geo}' if self.use_geo else ''}]; f_img has width {f_img.shape[1]}")
        if not self.use_geo:
            return f_img
        if f_geo is None:
            raise DimensionError("decoder built with geometric features but f_geo is missing")
        f_geo = as_tensor2(f_geo, "f_geo")
        if f_geo.shape != (f_img.shape[0], self.d_geo):
            raise DimensionError(f"decoder input layout is [pos_enc {self.pos_dim} | f_img {self.d_img} | "
                                 f"f_geo {self.d_geo}]; f_geo has shape {f_geo.shape}")
        return np.concatenate([f_img, f_geo], axis=1)

    def forward(self, points, f_img, f_geo=None, index=None) -> np.ndarray:
        """SDF for each point.

        Feature rows belong to instances; ``index[i]`` names the feature row of
        point ``i``.  Without ``index`` there must be one feature row per point.
        """
        pos = positional_encode(points, self.n_freqs)
        h = self.front.forward(pos, self._features(f_img, f_geo), index)
        self._head_input = h
        return self.head.forward(h)

    def backward(self, g: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
        """Return gradients for ``(f_img rows, f_geo rows or None)``; positions get none."""
        g_feat = self.front.backward(self.head.backward(g))
        g_img = g_feat[:, : self.d_img]
        g_geo = g_feat[:, self.d_img :] if self.use_geo else None
        return g_img, g_geo

    def adapt_grids(self, eps: float = 0.02, normalize: str = "none") -> bool:
        """Adapt KAN grids to the most recent head inputs; a no-op for other heads."""
        if self.head_kind != "kan" or self._head_input is None:
            return False
        self.head.adapt(self._head_input, eps, normalize=normalize)
        return True


def sdf_loss(pred, gt, delta: float = 0.1) -> tuple[float, np.ndarray]:
    """Mean clamped L1 loss and its gradient with respect to ``pred``.

    The clamp on ``pred`` is passed straight through in the gradient; with
    exact clamping a prediction far outside ``[-delta, delta]`` (such as the
    initial -1) would receive no signal at all.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64).reshape(pred.shape)
    diff = np.clip(pred, -delta, delta) - np.clip(gt, -delta, delta)
    loss = float(np.mean(np.abs(diff)))
    return loss, np.sign(diff) / diff.size

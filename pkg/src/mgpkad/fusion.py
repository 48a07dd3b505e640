"""Multi-head attention from the image feature and category into the prototype library."""

from __future__ import annotations

import math

import numpy as np

from .numcore import DimensionError, Module, Param, StateError, as_tensor2, xavier_uniform


def softmax(s: np.ndarray, axis: int = -1) -> np.ndarray:
    s = s - s.max(axis=axis, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=axis, keepdims=True)


class FusionAttention(Module):
    """One query per instance (image feature + one-hot category) attending over every prototype token.

    Tokens of the instance's own category get an additive logit bias of
    ``log(alpha)``; ``alpha = inf`` restricts attention to that category.
    """

    def __init__(self, d_img: int, n_categories: int, d_p: int, d_model: int, d_geo: int,
                 heads: int = 4, alpha: float = math.e, rng: np.random.Generator | None = None):
        if d_model % heads:
            raise DimensionError(f"d_model={d_model} is not divisible by heads={heads}")
        if not alpha > 0:
            raise ValueError("category_bias_alpha must be positive (inf allowed)")
        self.d_img, self.n_categories, self.d_p = d_img, n_categories, d_p
        self.d_model, self.d_geo, self.heads = d_model, d_geo, heads
        self.alpha = float(alpha)
        q_in = d_img + n_categories

        def init(o, i):
            return xavier_uniform(rng, o, i) if rng is not None else np.zeros((o, i))

        self.w_q = Param(init(d_model, q_in), "fusion.w_q")
        self.w_k = Param(init(d_model, d_p), "fusion.w_k")
        self.w_v = Param(init(d_model, d_p), "fusion.w_v")
        self.w_o = Param(init(d_geo, d_model), "fusion.w_o")
        self._cache = None
        self.last_weights: np.ndarray | None = None

    def named_params(self, prefix: str = "") -> list[tuple[str, Param]]:
        return [(prefix + "w_q", self.w_q), (prefix + "w_k", self.w_k),
                (prefix + "w_v", self.w_v), (prefix + "w_o", self.w_o)]

    def _bias(self, categories: np.ndarray, token_categories: np.ndarray) -> np.ndarray:
        match = categories[:, None] == token_categories[None, :]
        if math.isinf(self.alpha):
            return np.where(match, 0.0, -np.inf)
        return np.where(match, math.log(self.alpha), 0.0)

    def forward(self, f_img: np.ndarray, categories, tokens: np.ndarray, token_categories) -> np.ndarray:
        f_img = as_tensor2(f_img, "f_img")
        categories = np.asarray(categories, dtype=np.int64).reshape(-1)
        tokens = as_tensor2(tokens, "tokens")
        token_categories = np.asarray(token_categories, dtype=np.int64).reshape(-1)
        b, n = f_img.shape[0], tokens.shape[0]
        if f_img.shape[1] != self.d_img or categories.shape[0] != b:
            raise DimensionError(f"f_img {f_img.shape} / categories {categories.shape} do not match d_img={self.d_img}")
        if tokens.shape[1] != self.d_p or token_categories.shape[0] != n:
            raise DimensionError(f"tokens {tokens.shape} / token categories {token_categories.shape} do not match d_p={self.d_p}")
        if categories.min() < 0 or max(categories.max(), token_categories.max()) >= self.n_categories:
            raise DimensionError(f"category index out of range for {self.n_categories} categories")
        m, dh = self.heads, self.d_model // self.heads
        one_hot = np.eye(self.n_categories)[categories]
        q_in = np.concatenate([f_img, one_hot], axis=1)
        # head-major layout: (heads, rows, dh)
        Q = (q_in @ self.w_q.value.T).reshape(b, m, dh).transpose(1, 0, 2)
        K = (tokens @ self.w_k.value.T).reshape(n, m, dh).transpose(1, 0, 2)
        V = (tokens @ self.w_v.value.T).reshape(n, m, dh).transpose(1, 0, 2)
        scale = 1.0 / math.sqrt(dh)
        S = (Q @ K.transpose(0, 2, 1)) * scale + self._bias(categories, token_categories)[None, :, :]
        A = softmax(S, axis=-1)
        O = (A @ V).transpose(1, 0, 2).reshape(b, self.d_model)
        self._cache = (q_in, tokens, Q, K, V, A, O, scale)
        self.last_weights = A.transpose(1, 0, 2)
        return O @ self.w_o.value.T

    def backward(self, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return gradients with respect to ``(f_img, tokens)``."""
        if self._cache is None:
            raise StateError("FusionAttention.backward called before forward")
        q_in, tokens, Q, K, V, A, O, scale = self._cache
        b, n = q_in.shape[0], tokens.shape[0]
        m, dh = self.heads, self.d_model // self.heads
        self.w_o.grad += g.T @ O
        gO = (g @ self.w_o.value).reshape(b, m, dh).transpose(1, 0, 2)
        gA = gO @ V.transpose(0, 2, 1)
        gV = (A.transpose(0, 2, 1) @ gO).transpose(1, 0, 2).reshape(n, self.d_model)
        gS = A * (gA - (gA * A).sum(axis=-1, keepdims=True)) * scale
        gQ = (gS @ K).transpose(1, 0, 2).reshape(b, self.d_model)
        gK = (gS.transpose(0, 2, 1) @ Q).transpose(1, 0, 2).reshape(n, self.d_model)
        self.w_q.grad += gQ.T @ q_in
        self.w_k.grad += gK.T @ tokens
        self.w_v.grad += gV.T @ tokens
        g_img = (gQ @ self.w_q.value)[:, : self.d_img]
        g_tokens = gK @ self.w_k.value + gV @ self.w_v.value
        return g_img, g_tokens


def fuse(f_img, category: int, library, p: FusionAttention, tokens: np.ndarray | None = None) -> np.ndarray:
    """Geometric feature for a single image feature vector and category index."""
    if library.n_categories != p.n_categories:
        raise DimensionError(f"library has {library.n_categories} categories, fusion expects {p.n_categories}")
    feats = library.features.reshape(-1, library.feature_dim) if tokens is None else tokens
    out = p.forward(np.reshape(f_img, (1, -1)), [category], feats, library.token_categories())
    return out[0]

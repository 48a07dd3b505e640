"""The full reconstruction model, its ablation variants, and checkpoint persistence."""

from __future__ import annotations

import numpy as np

from .config import RunConfig
from .decoder import Decoder
from .envelope import read_envelope, write_envelope
from .fusion import FusionAttention
from .numcore import Adam, DimensionError, Module, Param, make_rng, mlp, no_grad
from .prior import PrototypeEncoder

VARIANTS = {
    # name: (decoder head, uses the geometric prior)
    "full": ("kan", True),
    "no-kan": ("linear", True),
    "no-prior": ("kan", False),
    "no-both": ("linear", False),
    "mlp-head": ("mlp", True),
}
ABLATIONS = tuple(v for v in VARIANTS if v != "full")

CHECKPOINT_MAGIC = b"MGPC"
CHECKPOINT_VERSION = 1


class ImageEncoder(Module):
    """Flattened depth image -> hidden -> ``d_img``; background depth maps to 1 after the shift."""

    def __init__(self, n_pixels: int, hidden: int, d_img: int, rng: np.random.Generator):
        self.n_pixels = n_pixels
        self.net = mlp([n_pixels, hidden, d_img], "silu", rng, "image")

    def named_params(self, prefix: str = "") -> list[tuple[str, Param]]:
        return self.net.named_params(prefix)

    def forward(self, depths: np.ndarray) -> np.ndarray:
        depths = np.asarray(depths, dtype=np.float64)
        if depths.ndim != 2 or depths.shape[1] != self.n_pixels:
            raise DimensionError(f"depth images must be (B, {self.n_pixels}), got {depths.shape}")
        return self.net.forward(depths - 1.0)

    def backward(self, g: np.ndarray) -> np.ndarray:
        return self.net.backward(g)


class Model(Module):
    def __init__(self, cfg: RunConfig, library_raw: np.ndarray | None, variant: str = "full", seed: int = 0):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {tuple(VARIANTS)}")
        head, self.use_prior = VARIANTS[variant]
        self.cfg, self.variant, self.seed = cfg, variant, seed
        self.image = ImageEncoder(cfg.image_res ** 2, cfg.encoder_hidden, cfg.d_img, make_rng(seed, 101))
        self.proto = self.fusion = None
        self.library_raw = None
        if self.use_prior:
            if library_raw is None:
                raise ValueError(f"variant {variant!r} needs a prototype library")
            raw = np.asarray(library_raw, dtype=np.float64)
            if raw.ndim != 3 or raw.shape[0] != cfg.n_categories or raw.shape[2] != 4:
                raise DimensionError(f"library samples must be ({cfg.n_categories}, K, 4), got {raw.shape}")
            self.library_raw = raw
            self._raw_flat = raw.reshape(-1, 4)
            self._token_cats = np.repeat(np.arange(raw.shape[0]), raw.shape[1])
            self.proto = PrototypeEncoder(cfg.d_p, make_rng(seed, 102))
            self.fusion = FusionAttention(cfg.d_img, cfg.n_categories, cfg.d_p, cfg.d_model, cfg.d_geo,
                                          cfg.heads, cfg.alpha, make_rng(seed, 103))
        self.decoder = Decoder(cfg.d_img, cfg.d_geo, cfg.kan_dims, cfg.frontend_hidden, cfg.pos_freqs,
                               head, self.use_prior, cfg.grid_size, cfg.spline_order, seed=seed)

    def named_params(self, prefix: str = "") -> list[tuple[str, Param]]:
        out = self.image.named_params(prefix + "image.")
        if self.use_prior:
            out += self.proto.named_params(prefix + "proto.") + self.fusion.named_params(prefix + "fusion.")
        return out + self.decoder.named_params(prefix + "decoder.")

    def group_param_counts(self) -> dict[str, int]:
        groups: dict[str, int] = {}
        for name, p in self.named_params():
            key = name.split(".")[0] if not name.startswith("decoder.") else ".".join(name.split(".")[:2])
            groups[key] = groups.get(key, 0) + p.value.size
        return groups

    # -- forward / backward -------------------------------------------------

    def encode(self, depths, categories) -> tuple[np.ndarray, np.ndarray | None]:
        f_img = self.image.forward(depths)
        if not self.use_prior:
            return f_img, None
        tokens = self.proto.forward(self._raw_flat)
        return f_img, self.fusion.forward(f_img, categories, tokens, self._token_cats)

    def forward(self, depths, categories, points, index) -> np.ndarray:
        f_img, f_geo = self.encode(depths, categories)
        return self.decoder.forward(points, f_img, f_geo, index)

    def backward(self, g: np.ndarray) -> None:
        g_img, g_geo = self.decoder.backward(g)
        if self.use_prior:
            g_img2, g_tokens = self.fusion.backward(g_geo)
            g_img = g_img + g_img2
            self.proto.backward(g_tokens)
        self.image.backward(g_img)

    def decode(self, points, f_img, f_geo, chunk: int = 32768) -> np.ndarray:
        """SDF of many points for a single instance's features, evaluated in fixed-size chunks."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        f_img = np.reshape(f_img, (1, -1))
        f_geo = None if f_geo is None else np.reshape(f_geo, (1, -1))
        out = np.empty(len(pts))
        with no_grad():
            for s in range(0, len(pts), chunk):
                e = min(s + chunk, len(pts))
                out[s:e] = self.decoder.forward(pts[s:e], f_img, f_geo, np.zeros(e - s, dtype=np.int64))[:, 0]
        return out

    def library_features(self) -> np.ndarray | None:
        if not self.use_prior:
            return None
        return self.proto.forward(self._raw_flat).reshape(self.library_raw.shape[0], self.library_raw.shape[1], -1)

    # -- grid state ---------------------------------------------------------

    def grid_arrays(self) -> dict[str, np.ndarray]:
        if self.decoder.head_kind != "kan":
            return {}
        out = {}
        for i, (knots, scale, shift) in enumerate(self.decoder.head.grid_state()):
            out[f"grid.{i}.knots"], out[f"grid.{i}.scale"], out[f"grid.{i}.shift"] = knots, scale, shift
        return out

    def load_grid_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if self.decoder.head_kind != "kan":
            return
        n = len(self.decoder.head.layers)
        self.decoder.head.load_grid_state(
            [(arrays[f"grid.{i}.knots"], arrays[f"grid.{i}.scale"], arrays[f"grid.{i}.shift"]) for i in range(n)])


def make_optimizer(model: Model, lr: float) -> Adam:
    return Adam(model.named_params(), lr=lr)


def save_checkpoint(path, model: Model, opt: Adam, step: int, extra: dict | None = None) -> None:
    arrays: dict[str, np.ndarray] = {}
    for (name, p), st in zip(opt.named, opt.states):
        arrays["param." + name] = p.value
        arrays["adam.m." + name] = st.m
        arrays["adam.v." + name] = st.v
    arrays.update(model.grid_arrays())
    if model.library_raw is not None:
        arrays["library.raw"] = model.library_raw
    meta = {
        "step": int(step),
        "variant": model.variant,
        "seed": int(model.seed),
        "config": model.cfg.to_dict(),
        "adam_steps": [int(s.step) for s in opt.states],
        "lr": float(opt.states[0].lr) if opt.states else 0.0,
        "params": [name for name, _ in opt.named],
    }
    if extra:
        meta["extra"] = extra
    write_envelope(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, meta, arrays)


def load_checkpoint(path) -> tuple[Model, Adam, dict]:
    meta, arrays = read_envelope(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    cfg = RunConfig.from_dict(meta["config"])
    model = Model(cfg, arrays.get("library.raw"), meta["variant"], meta["seed"])
    opt = make_optimizer(model, meta["lr"])
    names = [name for name, _ in opt.named]
    if names != meta["params"]:
        raise DimensionError("checkpoint parameter layout does not match the model it describes")
    for (name, p), st, n_steps in zip(opt.named, opt.states, meta["adam_steps"]):
        p.value[...] = arrays["param." + name]
        st.m[...] = arrays["adam.m." + name]
        st.v[...] = arrays["adam.v." + name]
        st.step = n_steps
    model.load_grid_arrays(arrays)
    return model, opt, meta

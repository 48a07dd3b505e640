"""Run configuration: desk and paper profiles plus a flat ``key = value`` file format.

Lines are ``key = value``; ``#`` starts a comment.  Integer lists are
comma separated.  Any key not in :class:`RunConfig` is an error.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .geometry import FAMILIES
from .kan import NORMALIZE_MODES, validate_schedule
from .numcore import DimensionError


class ConfigError(ValueError):
    pass


PROFILES = ("desk", "paper")


@dataclass(frozen=True)
class RunConfig:
    profile: str = "desk"
    seed: int = 0
    # data
    n_categories: int = 3
    instances_per_category: int = 20
    surface_points: int = 1024
    samples_per_shape: int = 4096
    image_res: int = 32
    split_train: float = 0.556
    split_val: float = 0.223
    # model
    d_img: int = 64
    d_geo: int = 64
    d_p: int = 32
    d_model: int = 64
    heads: int = 4
    alpha: float = math.e
    encoder_hidden: int = 128
    frontend_hidden: tuple = (128, 128)
    kan_dims: tuple = (64, 32, 16, 8, 1)
    pos_freqs: int = 6
    grid_size: int = 5
    spline_order: int = 3
    prototype_points: int = 512
    # training
    lr: float = 1e-3
    batch_size: int = 16
    queries_per_shape: int = 64
    steps: int = 3000
    epochs: int = 0
    ablation_steps: int = 0
    grid_eps: float = 0.02
    grid_normalize: str = "none"
    adapt_every: int = 200
    adapt_fraction: float = 0.5
    ckpt_every: int = 1000
    delta: float = 0.1
    # evaluation
    eval_resolution: int = 64
    gt_resolution: int = 128
    eval_samples: int = 10_000
    fscore_tau: float = 0.05

    def to_dict(self) -> dict:
        d = asdict(self)
        d["frontend_hidden"] = list(self.frontend_hidden)
        d["kan_dims"] = list(self.kan_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        d = dict(d)
        for k in ("frontend_hidden", "kan_dims"):
            if k in d:
                d[k] = tuple(int(v) for v in d[k])
        return validate(cls(**d))

    def train_steps(self, n_train: int) -> int:
        if self.epochs > 0:
            return self.epochs * max(1, math.ceil(n_train / self.batch_size))
        return self.steps

    def ablation_budget(self, n_train: int) -> int:
        return self.ablation_steps if self.ablation_steps > 0 else max(1, self.train_steps(n_train) // 2)


PAPER = dict(
    profile="paper", n_categories=9, instances_per_category=40,
    d_img=256, d_geo=256, d_p=128, d_model=256, frontend_hidden=(256, 256),
    kan_dims=(128, 32, 16, 8, 1), prototype_points=6272, lr=6e-5, epochs=200,
)


def profile_defaults(profile: str) -> RunConfig:
    if profile == "desk":
        return RunConfig()
    if profile == "paper":
        return replace(RunConfig(), **PAPER)
    raise ConfigError(f"unknown profile {profile!r}; expected one of {PROFILES}")


def validate(cfg: RunConfig) -> RunConfig:
    if cfg.profile not in PROFILES:
        raise ConfigError(f"unknown profile {cfg.profile!r}")
    if not 2 <= cfg.n_categories <= len(FAMILIES):
        raise ConfigError(f"n_categories must be in [2, {len(FAMILIES)}], got {cfg.n_categories}")
    if cfg.d_model % cfg.heads:
        raise ConfigError(f"d_model={cfg.d_model} is not divisible by heads={cfg.heads}")
    if cfg.d_p % 2:
        raise ConfigError(f"d_p must be even, got {cfg.d_p}")
    try:
        validate_schedule(cfg.kan_dims)
    except DimensionError as exc:
        raise ConfigError(str(exc)) from None
    if len(cfg.frontend_hidden) != 2:
        raise ConfigError(f"frontend_hidden needs two widths, got {list(cfg.frontend_hidden)}")
    if not cfg.alpha > 0:
        raise ConfigError("alpha must be positive (inf allowed)")
    if cfg.grid_normalize not in NORMALIZE_MODES:
        raise ConfigError(f"grid_normalize must be one of {NORMALIZE_MODES}, got {cfg.grid_normalize!r}")
    if not 0.0 <= cfg.grid_eps <= 1.0:
        raise ConfigError(f"grid_eps must be in [0, 1], got {cfg.grid_eps}")
    if not (0 < cfg.split_train and 0 < cfg.split_val and cfg.split_train + cfg.split_val < 1):
        raise ConfigError("split fractions must be positive and leave room for a test split")
    if cfg.delta <= 0 or cfg.lr <= 0:
        raise ConfigError("delta and lr must be positive")
    for name in ("instances_per_category", "surface_points", "samples_per_shape", "image_res", "batch_size",
                 "queries_per_shape", "prototype_points", "grid_size", "eval_resolution", "gt_resolution",
                 "eval_samples", "ckpt_every", "adapt_every", "encoder_hidden"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{name} must be positive")
    if cfg.steps < 1 and cfg.epochs < 1:
        raise ConfigError("either steps or epochs must be positive")
    return cfg


def _coerce(name: str, default, text: str):
    try:
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(v) for v in text.replace(" ", "").split(",") if v)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {name}: {text!r}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config(path=None, profile: str | None = None, seed: int | None = None) -> RunConfig:
    """Profile defaults, then the config file, then an explicit seed."""
    entries = parse_config_text(Path(path).read_text(), str(path)) if path else {}
    chosen = profile or entries.get("profile", "desk")
    if profile and "profile" in entries and entries["profile"] != profile:
        raise ConfigError(f"config file says profile={entries['profile']} but --profile {profile} was given")
    base = profile_defaults(chosen)
    known = {f.name: getattr(base, f.name) for f in fields(RunConfig)}
    unknown = sorted(set(entries) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    updates = {k: _coerce(k, known[k], v) for k, v in entries.items() if k != "profile"}
    if seed is not None:
        updates["seed"] = seed
    return validate(replace(base, **updates))


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"

"""Category geometric priors: prototype selection, point-wise prototype encoding and the library file."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import geometry
from .envelope import read_envelope, write_envelope
from .geometry import AnalyticShape
from .numcore import DimensionError, Module, Param, make_rng, mlp

LIBRARY_MAGIC = b"MGPK"
LIBRARY_VERSION = 1


TIE_RTOL = 1e-12
TIE_ATOL = 1e-300


class EmptyCategoryError(ValueError):
    pass


@dataclass
class ShapeInstance:
    id: str
    category: int
    shape: AnalyticShape
    surface_points: np.ndarray  # (N, 3), canonical order
    seed: int = 0


def canonical_surface(shape: AnalyticShape, n: int, seed: int) -> np.ndarray:
    """``n`` surface points sorted lexicographically by (x, y, z)."""
    pts = geometry.surface_points(shape, n, make_rng(seed, 17))
    order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))
    return pts[order]


def select_prototype(surface_sets: Sequence[np.ndarray]) -> int:
    """Index of the instance closest (squared Frobenius norm) to the pointwise category mean.

    Ties go to the lowest index.
    """
    if len(surface_sets) == 0:
        raise EmptyCategoryError("cannot select a prototype from an empty category")
    shapes = {np.shape(s) for s in surface_sets}
    if len(shapes) != 1:
        raise DimensionError(f"instances disagree on surface point layout: {sorted(shapes)}")
    X = np.stack([np.asarray(s, dtype=np.float64) for s in surface_sets])
    mu = X.mean(axis=0)
    dist = ((X - mu) ** 2).reshape(len(X), -1).sum(axis=1)
    # distances equal up to rounding count as ties
    near = dist <= dist.min() * (1.0 + TIE_RTOL) + TIE_ATOL
    return int(np.argmax(near))


def sample_prototype_points(shape: AnalyticShape, k: int, seed: int) -> np.ndarray:
    """``(k, 4)`` rows ``x, y, z, sdf``: half within 0.05 of the surface, half uniform."""
    rng = make_rng(seed, 19)
    n_near = k // 2
    near = geometry._near_surface(shape, n_near, 0.02, 0.05, rng)
    uni = rng.uniform(-1.0, 1.0, size=(k - n_near, 3))
    pts = np.concatenate([near, uni])
    return np.column_stack([pts, shape.sdf(pts)])


class PrototypeEncoder(Module):
    """Coordinates and SDF values go through separate MLPs, then a fusion MLP."""

    def __init__(self, d_p: int, rng: np.random.Generator | None = None):
        if d_p % 2:
            raise ValueError("prototype feature width must be even")
        self.d_p = d_p
        h = d_p // 2
        self.coord = mlp([3, h, h], "silu", rng, "proto.coord")
        self.sdf = mlp([1, h, h], "silu", rng, "proto.sdf")
        self.fuse = mlp([d_p, d_p, d_p], "silu", rng, "proto.fuse")

    def named_params(self, prefix: str = "") -> list[tuple[str, Param]]:
        return (self.coord.named_params(prefix + "coord.")
                + self.sdf.named_params(prefix + "sdf.")
                + self.fuse.named_params(prefix + "fuse."))

    def forward(self, raw: np.ndarray) -> np.ndarray:
        raw = np.asarray(raw, dtype=np.float64)
        if raw.ndim != 2 or raw.shape[1] != 4:
            raise DimensionError(f"prototype samples must be (K, 4), got {raw.shape}")
        a = self.coord.forward(raw[:, :3])
        b = self.sdf.forward(raw[:, 3:4])
        return self.fuse.forward(np.concatenate([a, b], axis=1))

    def backward(self, g: np.ndarray) -> np.ndarray:
        h = self.d_p // 2
        g_cat = self.fuse.backward(g)
        g_xyz = self.coord.backward(g_cat[:, :h])
        g_s = self.sdf.backward(g_cat[:, h:])
        return np.concatenate([g_xyz, g_s], axis=1)


def encode_prototype(raw: np.ndarray, encoder: PrototypeEncoder) -> np.ndarray:
    return encoder.forward(raw)


@dataclass
class PrototypeLibrary:
    prototype_ids: list[str]
    raw: np.ndarray       # (C, K, 4)
    features: np.ndarray  # (C, K, D_p)

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=np.float64)
        self.features = np.asarray(self.features, dtype=np.float64)
        c = len(self.prototype_ids)
        if self.raw.shape[0] != c or self.features.shape[0] != c:
            raise DimensionError(f"library has {c} ids but raw {self.raw.shape} / features {self.features.shape}")
        if self.raw.shape[1] != self.features.shape[1] or self.raw.shape[2] != 4:
            raise DimensionError(f"raw {self.raw.shape} and features {self.features.shape} disagree")

    @property
    def n_categories(self) -> int:
        return len(self.prototype_ids)

    @property
    def points_per_prototype(self) -> int:
        return self.raw.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[2]

    def token_categories(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_categories), self.points_per_prototype)

    def __eq__(self, other) -> bool:
        return (isinstance(other, PrototypeLibrary)
                and self.prototype_ids == other.prototype_ids
                and np.array_equal(self.raw, other.raw)
                and np.array_equal(self.features, other.features))


def build_library(instances_by_category: Sequence[Sequence[ShapeInstance]], k: int,
                  encoder: PrototypeEncoder, seed: int) -> PrototypeLibrary:
    ids, raws = [], []
    for c, insts in enumerate(instances_by_category):
        if not insts:
            raise EmptyCategoryError(f"category {c} has no instances")
        best = insts[select_prototype([i.surface_points for i in insts])]
        ids.append(best.id)
        raws.append(sample_prototype_points(best.shape, k, seed * 1000 + c))
    raw = np.stack(raws)
    feats = np.stack([encoder.forward(r) for r in raw])
    return PrototypeLibrary(ids, raw, feats)


def save_library(path, library: PrototypeLibrary) -> None:
    meta = {"prototype_ids": library.prototype_ids, "C": library.n_categories,
            "K": library.points_per_prototype, "D_p": library.feature_dim}
    write_envelope(path, LIBRARY_MAGIC, LIBRARY_VERSION, meta,
                   {"raw": library.raw, "features": library.features})


def load_library(path) -> PrototypeLibrary:
    meta, arrays = read_envelope(path, LIBRARY_MAGIC, LIBRARY_VERSION)
    return PrototypeLibrary(list(meta["prototype_ids"]), arrays["raw"], arrays["features"])


def pca_projection(library: PrototypeLibrary) -> list[tuple[int, float, float]]:
    """Project each category's flattened prototype features onto the top two principal axes."""
    c = library.n_categories
    if c < 2:
        raise ValueError("PCA projection needs at least two categories")
    X = library.features.reshape(c, -1)
    Xc = X - X.mean(axis=0)
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    coords = np.zeros((c, 2))
    for j in range(min(2, vt.shape[0])):
        if s[j] <= 1e-12 * max(s[0], 1e-300):
            continue
        axis = vt[j]
        axis = axis * np.sign(axis[np.argmax(np.abs(axis))])
        coords[:, j] = Xc @ axis
    return [(i, float(coords[i, 0]), float(coords[i, 1])) for i in range(c)]


def write_pca_csv(path, rows: list[tuple[int, float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["category", "x", "y"])
        for cat, x, y in rows:
            w.writerow([cat, repr(x), repr(y)])

"""Analytic SDF shapes, point sampling, depth rendering, marching cubes and OBJ I/O.

All coordinates live in the normalized domain ``[-1, 1]^3``. SDFs are
negative inside.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import _backend
from .mctable import EDGE_OFFSETS, TRI_TABLE
from .numcore import make_rng

KINDS = ("sphere", "box", "torus", "cylinder", "capsule")
DEPTH_SENTINEL = 2.0


@dataclass(frozen=True)
class AnalyticShape:
    kind: str
    params: tuple[float, ...]
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}")

    def local_extent(self) -> np.ndarray:
        """Half-extent of the unposed shape along each axis."""
        p = self.params
        if self.kind == "sphere":
            return np.array([p[0]] * 3)
        if self.kind == "box":
            return np.array(p[:3])
        if self.kind == "torus":
            return np.array([p[0] + p[1], p[1], p[0] + p[1]])
        if self.kind == "cylinder":
            return np.array([p[0], p[1], p[0]])
        return np.array([p[0], p[1] + p[0], p[0]])

    def extent(self) -> np.ndarray:
        return np.abs(np.asarray(self.translation)) + self.scale * self.local_extent()

    def sdf(self, points) -> np.ndarray:
        return analytic_sdf(self, points)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": list(self.params),
                "translation": list(self.translation), "scale": self.scale}

    @classmethod
    def from_dict(cls, d: dict) -> "AnalyticShape":
        return cls(d["kind"], tuple(d["params"]), tuple(d["translation"]), d["scale"])


def _local_sdf(kind: str, params: tuple[float, ...], p: np.ndarray) -> np.ndarray:
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    if kind == "sphere":
        return np.sqrt(x * x + y * y + z * z) - params[0]
    if kind == "box":
        q = np.abs(p) - np.asarray(params[:3])
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        return outside + np.minimum(q.max(axis=-1), 0.0)
    if kind == "torus":
        big, small = params
        qx = np.sqrt(x * x + z * z) - big
        return np.sqrt(qx * qx + y * y) - small
    if kind == "cylinder":
        r, h = params
        dx = np.sqrt(x * x + z * z) - r
        dy = np.abs(y) - h
        return np.minimum(np.maximum(dx, dy), 0.0) + np.hypot(np.maximum(dx, 0.0), np.maximum(dy, 0.0))
    r, h = params  # capsule along y
    cy = y - np.clip(y, -h, h)
    return np.sqrt(x * x + cy * cy + z * z) - r


def analytic_sdf(shape: AnalyticShape, p) -> np.ndarray:
    """Exact signed distance of ``shape`` at point(s) ``p`` (shape ``(..., 3)``)."""
    p = np.asarray(p, dtype=np.float64)
    local = (p - np.asarray(shape.translation)) / shape.scale
    return shape.scale * _local_sdf(shape.kind, shape.params, local)


def sdf_gradient(fn: Callable[[np.ndarray], np.ndarray], p: np.ndarray, h: float = 1e-6) -> np.ndarray:
    g = np.empty_like(p)
    for a in range(3):
        e = np.zeros(3)
        e[a] = h
        g[:, a] = (fn(p + e) - fn(p - e)) / (2 * h)
    return g


# ---------------------------------------------------------------------------
# Shape families


@dataclass(frozen=True)
class Family:
    name: str
    kind: str
    ranges: tuple[tuple[float, float], ...]


FAMILIES = (
    Family("sphere", "sphere", ((0.35, 0.6),)),
    Family("box", "box", ((0.25, 0.55), (0.25, 0.55), (0.25, 0.55))),
    Family("torus", "torus", ((0.4, 0.6), (0.1, 0.22))),
    Family("cylinder", "cylinder", ((0.25, 0.5), (0.3, 0.6))),
    Family("capsule", "capsule", ((0.15, 0.3), (0.2, 0.45))),
    Family("slab", "box", ((0.4, 0.6), (0.06, 0.12), (0.3, 0.6))),
    Family("rod", "capsule", ((0.07, 0.12), (0.45, 0.65))),
    Family("ring", "torus", ((0.5, 0.65), (0.06, 0.1))),
    Family("disc", "cylinder", ((0.45, 0.65), (0.06, 0.12))),
)


def random_shape(family: int, rng: np.random.Generator) -> AnalyticShape:
    """Random member of ``FAMILIES[family]``, posed to fit inside ``[-0.9, 0.9]^3``."""
    fam = FAMILIES[family]
    params = tuple(float(rng.uniform(lo, hi)) for lo, hi in fam.ranges)
    scale = float(rng.uniform(0.85, 1.0))
    shift = rng.uniform(-0.1, 0.1, size=3)
    shape = AnalyticShape(fam.kind, params, (0.0, 0.0, 0.0), 1.0)
    ext = scale * shape.local_extent()
    room = np.maximum(0.9 - ext, 0.0)
    if np.any(ext > 0.9):
        scale *= 0.9 / ext.max()
        room = np.zeros(3)
    shift = np.clip(shift, -room, room)
    return AnalyticShape(fam.kind, params, tuple(float(s) for s in shift), scale)


# ---------------------------------------------------------------------------
# Sampling


def project_to_surface(shape: AnalyticShape, p: np.ndarray, iters: int = 6) -> np.ndarray:
    fn = shape.sdf
    p = p.copy()
    for _ in range(iters):
        d = fn(p)
        g = sdf_gradient(fn, p)
        n = np.linalg.norm(g, axis=1, keepdims=True)
        p -= d[:, None] * g / np.maximum(n, 1e-12)
    return p


def surface_points(shape: AnalyticShape, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` points on the zero level set, found by projecting random domain points."""
    out = np.empty((0, 3))
    while out.shape[0] < n:
        p = project_to_surface(shape, rng.uniform(-1.0, 1.0, size=(2 * n, 3)))
        ok = (np.abs(shape.sdf(p)) < 1e-6) & np.all(np.abs(p) <= 1.0, axis=1)
        out = np.concatenate([out, p[ok]])
    return out[:n]


def _near_surface(shape: AnalyticShape, n: int, sigma: float, band: float | None,
                  rng: np.random.Generator) -> np.ndarray:
    out = np.empty((0, 3))
    while out.shape[0] < n:
        need = n - out.shape[0]
        p = surface_points(shape, need, rng) + rng.normal(0.0, sigma, size=(need, 3))
        p = np.clip(p, -1.0, 1.0)
        if band is not None:
            p = p[np.abs(shape.sdf(p)) < band]
        out = np.concatenate([out, p])
    return out[:n]


def sample_training_points(shape: AnalyticShape, n: int, seed: int) -> np.ndarray:
    """``(n, 4)`` rows ``x, y, z, sdf``: 40% near-surface, 40% uniform, 20% thin shell."""
    rng = make_rng(seed, 11)
    n_near = (4 * n) // 10
    n_uni = (4 * n) // 10
    n_shell = n - n_near - n_uni
    pts = np.concatenate([
        _near_surface(shape, n_near, 0.03, None, rng),
        rng.uniform(-1.0, 1.0, size=(n_uni, 3)),
        _near_surface(shape, n_shell, 0.005, 0.01, rng),
    ])
    return np.column_stack([pts, shape.sdf(pts)])


# ---------------------------------------------------------------------------
# Depth rendering


@dataclass
class DepthImage:
    width: int
    height: int
    depths: np.ndarray  # (height, width); row 0 is y = +1

    def flat(self) -> np.ndarray:
        return self.depths.reshape(-1)


def pixel_centers(resolution: int) -> tuple[np.ndarray, np.ndarray]:
    c = -1.0 + (np.arange(resolution) + 0.5) * (2.0 / resolution)
    xs, ys = np.meshgrid(c, c[::-1])
    return xs, ys


def render_depth(shape: AnalyticShape, resolution: int = 32, steps: int = 64, threshold: float = 1e-4) -> DepthImage:
    """Orthographic sphere-traced depth along -z from the plane z = 1."""
    xs, ys = pixel_centers(resolution)
    origin = np.column_stack([xs.ravel(), ys.ravel(), np.ones(xs.size)])
    t = np.zeros(xs.size)
    hit = np.zeros(xs.size, dtype=bool)
    active = np.ones(xs.size, dtype=bool)
    for _ in range(steps):
        if not active.any():
            break
        p = origin[active].copy()
        p[:, 2] -= t[active]
        d = shape.sdf(p)
        idx = np.nonzero(active)[0]
        done = d < threshold
        hit[idx[done]] = True
        t[idx[~done]] += d[~done]
        active[idx[done]] = False
        active &= t <= DEPTH_SENTINEL
    depth = np.where(hit & (t <= DEPTH_SENTINEL), t, DEPTH_SENTINEL)
    return DepthImage(resolution, resolution, depth.reshape(resolution, resolution))


# ---------------------------------------------------------------------------
# Meshes


@dataclass
class Mesh:
    vertices: np.ndarray
    triangles: np.ndarray
    normals: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise IndexError("triangle index out of range")

    @property
    def empty(self) -> bool:
        return len(self.triangles) == 0

    def face_normals(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        n = np.cross(b - a, c - a)
        return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)

    def areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def signed_volume(self) -> float:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)

    def edge_counts(self) -> dict[tuple[int, int], int]:
        t = self.triangles
        e = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
        keys, counts = np.unique(e, axis=0, return_counts=True)
        return {(int(a), int(b)): int(c) for (a, b), c in zip(keys, counts)}

    def is_watertight(self) -> bool:
        if self.empty:
            return False
        return all(c == 2 for c in self.edge_counts().values())


def grid_coords(resolution: int, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    return np.linspace(lo, hi, resolution)


def grid_points(resolution: int, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    """Lattice points in C order, matching ``values.reshape(res, res, res)`` with ij indexing."""
    c = grid_coords(resolution, lo, hi)
    X, Y, Z = np.meshgrid(c, c, c, indexing="ij")
    return np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])


def sdf_grid(shape: AnalyticShape, resolution: int = 64, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    return shape.sdf(grid_points(resolution, lo, hi)).reshape(resolution, resolution, resolution)


def marching_cubes(values: np.ndarray, iso: float = 0.0, lo: float = -1.0, hi: float = 1.0) -> Mesh:
    """Extract the ``iso`` level set of a field sampled on a regular lattice spanning ``[lo, hi]^3``.

    Vertices are welded by lattice edge; vertex normals come from central
    differences of the field and point toward increasing values.
    """
    v = np.ascontiguousarray(values, dtype=np.float64)
    if v.ndim != 3 or min(v.shape) < 2:
        raise ValueError(f"marching cubes needs a 3-D grid of at least 2^3, got {v.shape}")
    ids = _backend.mc_triangles(v, float(iso), TRI_TABLE, EDGE_OFFSETS)
    if ids.size == 0:
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros((0, 3)))
    nx, ny, nz = v.shape
    spacing = np.array([(hi - lo) / (n - 1) for n in v.shape])

    uniq, inv = np.unique(ids.ravel(), return_inverse=True)
    tris = inv.reshape(-1, 3)
    axis = uniq % 3
    node = uniq // 3
    i0, j0, k0 = node // (ny * nz), (node // nz) % ny, node % nz
    step = np.eye(3, dtype=np.int64)[axis]
    i1, j1, k1 = i0 + step[:, 0], j0 + step[:, 1], k0 + step[:, 2]
    v0, v1 = v[i0, j0, k0], v[i1, j1, k1]
    t = (iso - v0) / (v1 - v0)
    base = np.column_stack([i0, j0, k0]).astype(np.float64)
    verts = lo + spacing * (base + t[:, None] * step)

    grads = np.stack(np.gradient(v, *spacing), axis=-1)
    n = (1.0 - t)[:, None] * grads[i0, j0, k0] + t[:, None] * grads[i1, j1, k1]
    n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)

    mesh = Mesh(verts, tris, n)
    keep = mesh.areas() > 1e-18
    if not keep.all():
        tris = tris[keep]
        used, remap = np.unique(tris.ravel(), return_inverse=True)
        mesh = Mesh(verts[used], remap.reshape(-1, 3), n[used])
    return mesh


def sample_mesh_surface(mesh: Mesh, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Area-weighted uniform surface samples and their (interpolated) unit normals."""
    if mesh.empty:
        raise ValueError("cannot sample an empty mesh")
    rng = make_rng(seed, 13)
    areas = mesh.areas()
    cdf = np.cumsum(areas)
    tri = np.searchsorted(cdf, rng.uniform(0.0, cdf[-1], size=n), side="right")
    tri = np.minimum(tri, len(areas) - 1)
    u = rng.uniform(size=n)
    w = rng.uniform(size=n)
    flip = u + w > 1.0
    u[flip], w[flip] = 1.0 - u[flip], 1.0 - w[flip]
    idx = mesh.triangles[tri]
    a, b, c = (mesh.vertices[idx[:, i]] for i in range(3))
    pts = a + u[:, None] * (b - a) + w[:, None] * (c - a)
    if mesh.normals is not None and len(mesh.normals) == len(mesh.vertices):
        na, nb, nc = (mesh.normals[idx[:, i]] for i in range(3))
        nrm = (1.0 - u - w)[:, None] * na + u[:, None] * nb + w[:, None] * nc
        bad = np.linalg.norm(nrm, axis=1) < 1e-12
        if bad.any():
            nrm[bad] = mesh.face_normals()[tri[bad]]
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    else:
        nrm = mesh.face_normals()[tri]
    return pts, nrm


# ---------------------------------------------------------------------------
# OBJ


class ObjParseError(ValueError):
    pass


def write_obj(path, mesh: Mesh) -> None:
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    has_n = mesh.normals is not None and len(mesh.normals) == len(mesh.vertices) and len(mesh.vertices) > 0
    if has_n:
        lines += [f"vn {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.normals]
        lines += [f"f {a+1}//{a+1} {b+1}//{b+1} {c+1}//{c+1}" for a, b, c in mesh.triangles]
    else:
        lines += [f"f {a+1} {b+1} {c+1}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_obj(path) -> Mesh:
    verts, norms, tris = [], [], []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tag, *rest = line.split()
        try:
            if tag == "v":
                verts.append([float(t) for t in rest[:3]])
                if len(rest) < 3:
                    raise ValueError("vertex needs 3 coordinates")
            elif tag == "vn":
                norms.append([float(t) for t in rest[:3]])
            elif tag == "f":
                if len(rest) < 3:
                    raise ValueError("face needs at least 3 vertices")
                idx = [int(tok.split("/")[0]) - 1 for tok in rest]
                if min(idx) < 0:
                    raise ValueError("face indices must be positive")
                for i in range(1, len(idx) - 1):
                    tris.append([idx[0], idx[i], idx[i + 1]])
        except ValueError as exc:
            raise ObjParseError(f"{path}:{lineno}: {exc}: {raw!r}") from None
    v = np.array(verts, dtype=np.float64).reshape(-1, 3)
    t = np.array(tris, dtype=np.int64).reshape(-1, 3)
    if t.size and t.max() >= len(v):
        raise ObjParseError(f"{path}: face references vertex {t.max() + 1} of {len(v)}")
    nrm = np.array(norms, dtype=np.float64).reshape(-1, 3) if len(norms) == len(verts) and norms else None
    return Mesh(v, t, nrm)

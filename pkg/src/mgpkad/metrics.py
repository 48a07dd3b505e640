"""Reconstruction metrics: Chamfer distance, F-score, normal consistency, IoU and an SDF PSNR proxy."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _backend
from .geometry import AnalyticShape, Mesh, marching_cubes, sample_mesh_surface, sdf_grid


class EmptyInputError(ValueError):
    pass


class KDTree:
    """Axis-median kd-tree over 3-D points with bucketed leaves; exact nearest-neighbour queries.

    Ties between equidistant points resolve to the lowest original index, so
    results match a brute-force ``argmin`` exactly.
    """

    def __init__(self, points, leaf_size: int = 16):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            raise EmptyInputError("cannot build a kd-tree on an empty cloud")
        self.n = len(pts)
        perm = np.arange(self.n)
        work = pts.copy()
        start, end, axis, split, left, right = [], [], [], [], [], []

        def new_node(s, e):
            start.append(s); end.append(e); axis.append(0); split.append(0.0)
            left.append(-1); right.append(-1)
            return len(start) - 1

        todo = [new_node(0, self.n)]
        while todo:
            node = todo.pop()
            s, e = start[node], end[node]
            if e - s <= leaf_size:
                continue
            chunk = work[s:e]
            ax = int(np.argmax(chunk.max(axis=0) - chunk.min(axis=0)))
            mid = (e - s) // 2
            order = np.argpartition(chunk[:, ax], mid, kind="introselect")
            work[s:e] = chunk[order]
            perm[s:e] = perm[s:e][order]
            axis[node] = ax
            split[node] = float(work[s + mid, ax])
            left[node] = new_node(s, s + mid)
            right[node] = new_node(s + mid, e)
            todo += [left[node], right[node]]

        self.points = np.ascontiguousarray(work)
        self.perm = perm.astype(np.int64)
        self._nodes = tuple(np.asarray(a, dtype=dt) for a, dt in (
            (start, np.int64), (end, np.int64), (axis, np.int64), (split, np.float64),
            (left, np.int64), (right, np.int64)))

    def query(self, queries) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(index, squared_distance)`` of the nearest point for each query."""
        q = np.ascontiguousarray(np.asarray(queries, dtype=np.float64).reshape(-1, 3))
        return _backend.kdtree_query(self.points, self.perm, *self._nodes, q)


def brute_force_nn(points, queries) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(points, dtype=np.float64)
    q = np.asarray(queries, dtype=np.float64)
    idx = np.empty(len(q), dtype=np.int64)
    d2 = np.empty(len(q))
    for i in range(len(q)):
        d = q[i] - p
        dist = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]
        idx[i] = np.argmin(dist)
        d2[i] = dist[idx[i]]
    return idx, d2


def _check(a, name):
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0:
        raise EmptyInputError(f"{name} point cloud is empty")
    return a


def chamfer(a, b) -> float:
    """``1e3 * (mean_a min_b |p-q|^2 + mean_b min_a |p-q|^2)``."""
    a, b = _check(a, "first"), _check(b, "second")
    _, d_ab = KDTree(b).query(a)
    _, d_ba = KDTree(a).query(b)
    return float(1e3 * (d_ab.mean() + d_ba.mean()))


def fscore(a, b, tau: float = 0.05) -> float:
    """F-score in percent: precision is the share of ``a`` within ``tau`` of ``b``."""
    a, b = _check(a, "first"), _check(b, "second")
    _, d_ab = KDTree(b).query(a)
    _, d_ba = KDTree(a).query(b)
    return _fscore_from(d_ab, d_ba, tau)


def _fscore_from(d_ab, d_ba, tau):
    precision = float(np.mean(np.sqrt(d_ab) <= tau))
    recall = float(np.mean(np.sqrt(d_ba) <= tau))
    if precision + recall == 0.0:
        return 0.0
    return 200.0 * precision * recall / (precision + recall)


def normal_consistency_points(pa, na, pb, nb) -> float:
    ia, _ = KDTree(pb).query(pa)
    ib, _ = KDTree(pa).query(pb)
    ab = np.abs(np.einsum("ij,ij->i", na, nb[ia]))
    ba = np.abs(np.einsum("ij,ij->i", nb, na[ib]))
    return float(np.clip(0.5 * (ab.mean() + ba.mean()), 0.0, 1.0))


def normal_consistency(mesh_a: Mesh, mesh_b: Mesh, n: int = 10_000, seed: int = 0) -> float:
    pa, na = sample_mesh_surface(mesh_a, n, seed)
    pb, nb = sample_mesh_surface(mesh_b, n, seed + 1)
    return normal_consistency_points(pa, na, pb, nb)


def iou(sdf_a: np.ndarray, sdf_b: np.ndarray) -> float:
    a, b = np.asarray(sdf_a), np.asarray(sdf_b)
    if a.shape != b.shape:
        raise ValueError(f"grid shapes differ: {a.shape} vs {b.shape}")
    occ_a, occ_b = a < 0, b < 0
    union = np.count_nonzero(occ_a | occ_b)
    if union == 0:
        return 1.0
    return float(np.count_nonzero(occ_a & occ_b) / union)


PSNR_CAP = 99.0


def psnr_sdf(pred: np.ndarray, gt: np.ndarray, delta: float = 0.1) -> float:
    """PSNR of clamped SDF grids with peak ``delta``; a stand-in for rendered-image PSNR."""
    p = np.clip(np.asarray(pred, dtype=np.float64), -delta, delta)
    g = np.clip(np.asarray(gt, dtype=np.float64), -delta, delta)
    mse = float(np.mean((p - g) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(delta * delta / mse))


# ---------------------------------------------------------------------------
# Instance evaluation and aggregation


METRIC_KEYS = ("cd", "fscore", "nc", "iou", "psnr_sdf")


@dataclass
class EvalConfig:
    n_samples: int = 10_000
    tau: float = 0.05
    delta: float = 0.1
    grid_resolution: int = 64
    gt_resolution: int = 128
    seed: int = 0


@dataclass
class MetricReport:
    cd: float = math.nan
    fscore: float = math.nan
    nc: float = math.nan
    iou: float = math.nan
    psnr_sdf: float = math.nan
    category: int = -1
    instance: str = ""
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error

    def to_dict(self) -> dict:
        return asdict(self)


def gt_surface(shape: AnalyticShape, cfg: EvalConfig) -> tuple[np.ndarray, np.ndarray]:
    mesh = marching_cubes(sdf_grid(shape, cfg.gt_resolution))
    return sample_mesh_surface(mesh, cfg.n_samples, cfg.seed + 101)


def evaluate_instance(pred_mesh: Mesh, pred_grid: np.ndarray, gt_shape: AnalyticShape,
                      cfg: EvalConfig | None = None, category: int = -1, instance: str = "",
                      gt_samples: tuple[np.ndarray, np.ndarray] | None = None) -> MetricReport:
    """All five metrics for one reconstruction.

    ``pred_grid`` is the predicted SDF on the ``cfg.grid_resolution`` lattice.
    An empty predicted mesh yields a report flagged with ``error``.
    """
    cfg = cfg or EvalConfig()
    report = MetricReport(category=category, instance=instance)
    if pred_mesh.empty:
        report.error = "empty predicted mesh"
        return report
    gp, gn = gt_samples if gt_samples is not None else gt_surface(gt_shape, cfg)
    pp, pn = sample_mesh_surface(pred_mesh, cfg.n_samples, cfg.seed)
    i_pg, d_pg = KDTree(gp).query(pp)
    i_gp, d_gp = KDTree(pp).query(gp)
    report.cd = float(1e3 * (d_pg.mean() + d_gp.mean()))
    report.fscore = _fscore_from(d_pg, d_gp, cfg.tau)
    ab = np.abs(np.einsum("ij,ij->i", pn, gn[i_pg]))
    ba = np.abs(np.einsum("ij,ij->i", gn, pn[i_gp]))
    report.nc = float(np.clip(0.5 * (ab.mean() + ba.mean()), 0.0, 1.0))
    gt_grid = sdf_grid(gt_shape, pred_grid.shape[0])
    report.iou = iou(pred_grid, gt_grid)
    report.psnr_sdf = psnr_sdf(pred_grid, gt_grid, cfg.delta)
    return report


@dataclass
class Aggregate:
    per_category: dict[int, dict[str, float]] = field(default_factory=dict)
    mean: dict[str, float] = field(default_factory=dict)
    excluded: list[str] = field(default_factory=list)


def aggregate(reports: list[MetricReport]) -> Aggregate:
    """Unweighted instance mean per category; overall mean is the mean of category means."""
    agg = Aggregate()
    by_cat: dict[int, list[MetricReport]] = {}
    for r in reports:
        if not r.ok:
            agg.excluded.append(f"{r.instance}: {r.error}")
            continue
        by_cat.setdefault(r.category, []).append(r)
    for cat in sorted(by_cat):
        agg.per_category[cat] = {k: float(np.mean([getattr(r, k) for r in by_cat[cat]])) for k in METRIC_KEYS}
    if agg.per_category:
        agg.mean = {k: float(np.mean([v[k] for v in agg.per_category.values()])) for k in METRIC_KEYS}
    else:
        agg.mean = {k: math.nan for k in METRIC_KEYS}
    return agg

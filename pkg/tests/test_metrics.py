import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mgpkad.geometry import AnalyticShape, Mesh, marching_cubes, sdf_grid
from mgpkad.metrics import (
    PSNR_CAP,
    EmptyInputError,
    EvalConfig,
    KDTree,
    MetricReport,
    aggregate,
    brute_force_nn,
    chamfer,
    evaluate_instance,
    fscore,
    iou,
    normal_consistency,
    normal_consistency_points,
    psnr_sdf,
)


@pytest.mark.parametrize("seed", range(100))
def test_kdtree_equals_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 400))
    pts = rng.normal(size=(n, 3))
    if seed % 4 == 0:
        pts = np.round(pts, 1)  # many duplicates and ties
    q = rng.normal(size=(60, 3))
    q[:10] = pts[rng.integers(0, n, size=10)]
    tree = KDTree(pts, leaf_size=int(rng.integers(1, 20)))
    i_t, d_t = tree.query(q)
    i_b, d_b = brute_force_nn(pts, q)
    np.testing.assert_array_equal(i_t, i_b)
    np.testing.assert_array_equal(d_t, d_b)


@given(st.lists(st.tuples(*[st.integers(-3, 3)] * 3), min_size=1, max_size=40),
       st.lists(st.tuples(*[st.integers(-3, 3)] * 3), min_size=1, max_size=10))
def test_kdtree_ties_resolve_to_lowest_index(points, queries):
    pts, q = np.array(points, dtype=float), np.array(queries, dtype=float)
    i_t, d_t = KDTree(pts, leaf_size=2).query(q)
    i_b, d_b = brute_force_nn(pts, q)
    np.testing.assert_array_equal(i_t, i_b)
    np.testing.assert_array_equal(d_t, d_b)


def test_empty_inputs_raise():
    with pytest.raises(EmptyInputError):
        KDTree(np.zeros((0, 3)))
    with pytest.raises(EmptyInputError):
        chamfer(np.zeros((0, 3)), np.ones((2, 3)))
    with pytest.raises(EmptyInputError):
        fscore(np.ones((2, 3)), [])


def test_trivial_identical_inputs():
    rng = np.random.default_rng(0)
    p = rng.normal(size=(300, 3))
    n = rng.normal(size=(300, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    assert chamfer(p, p) == 0.0
    assert fscore(p, p) == 100.0
    assert normal_consistency_points(p, n, p, -n) == 1.0
    grid = sdf_grid(AnalyticShape("sphere", (0.5,)), 16)
    assert iou(grid, grid) == 1.0
    assert psnr_sdf(grid, grid) == PSNR_CAP


def test_trivial_identical_meshes():
    mesh = marching_cubes(sdf_grid(AnalyticShape("box", (0.4, 0.3, 0.5)), 24))
    assert normal_consistency(mesh, mesh, n=2000) == pytest.approx(1.0, abs=0.02)


def test_chamfer_frozen_value():
    a = np.array([[0.0, 0.0, 0.0]])
    b = np.array([[0.1, 0.0, 0.0], [0.0, 0.3, 0.0]])
    # a->b: 0.01; b->a: (0.01 + 0.09) / 2
    assert chamfer(a, b) == pytest.approx(1e3 * (0.01 + 0.05))


def test_fscore_frozen_value():
    a = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    b = np.array([[0.0, 0.0, 0.01]])
    # precision 1/2, recall 1
    assert fscore(a, b, tau=0.05) == pytest.approx(200 * 0.5 / 1.5)
    assert fscore(a, b + 10.0) == 0.0


@given(st.integers(0, 2**31))
def test_metric_ranges_and_symmetry(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(-1, 1, size=(2, 50, 3))
    assert chamfer(a, b) == pytest.approx(chamfer(b, a))
    assert 0.0 <= fscore(a, b) <= 100.0
    na, nb = rng.normal(size=(2, 50, 3))
    na /= np.linalg.norm(na, axis=1, keepdims=True)
    nb /= np.linalg.norm(nb, axis=1, keepdims=True)
    assert 0.0 <= normal_consistency_points(a, na, b, nb) <= 1.0
    ga, gb = rng.normal(size=(2, 4, 4, 4))
    assert 0.0 <= iou(ga, gb) <= 1.0
    assert iou(ga, gb) == iou(gb, ga)


def test_iou_frozen_and_errors():
    a = np.array([-1.0, -1.0, 1.0, 1.0])
    b = np.array([-1.0, 1.0, -1.0, 1.0])
    assert iou(a, b) == pytest.approx(1 / 3)
    assert iou(np.ones(4), np.ones(4)) == 1.0
    with pytest.raises(ValueError):
        iou(np.ones(3), np.ones(4))


def test_psnr_frozen():
    gt = np.zeros(4)
    pred = np.full(4, 0.01)
    assert psnr_sdf(pred, gt, 0.1) == pytest.approx(20.0)
    # clamping caps the error at delta
    assert psnr_sdf(np.full(4, 5.0), gt, 0.1) == pytest.approx(0.0)


def test_evaluate_instance_self_reconstruction():
    shape = AnalyticShape("sphere", (0.5,))
    cfg = EvalConfig(n_samples=2000, grid_resolution=32, gt_resolution=48)
    grid = sdf_grid(shape, 32)
    rep = evaluate_instance(marching_cubes(grid), grid, shape, cfg, category=1, instance="s")
    assert rep.ok
    # sampling density, not geometry, dominates the residual at 2000 points
    assert rep.cd < 2.0 and rep.fscore > 97.0 and rep.nc > 0.99
    assert rep.iou == 1.0 and rep.psnr_sdf == PSNR_CAP
    worse = AnalyticShape("sphere", (0.4,))
    wgrid = sdf_grid(worse, 32)
    bad = evaluate_instance(marching_cubes(wgrid), wgrid, shape, cfg)
    assert bad.cd > rep.cd and bad.iou < 1.0


def test_evaluate_instance_flags_empty_mesh():
    empty = Mesh(np.zeros((0, 3)), np.zeros((0, 3)))
    rep = evaluate_instance(empty, np.ones((8, 8, 8)), AnalyticShape("sphere", (0.5,)))
    assert not rep.ok and math.isnan(rep.cd)


def test_aggregate_is_mean_of_category_means():
    reports = [
        MetricReport(1.0, 10.0, 0.5, 0.2, 10.0, category=0, instance="a"),
        MetricReport(3.0, 30.0, 0.7, 0.4, 30.0, category=0, instance="b"),
        MetricReport(10.0, 50.0, 0.9, 0.9, 50.0, category=1, instance="c"),
        MetricReport(category=1, instance="d", error="empty predicted mesh"),
    ]
    agg = aggregate(reports)
    assert agg.per_category[0]["cd"] == 2.0
    assert agg.per_category[1]["cd"] == 10.0
    assert agg.mean["cd"] == 6.0
    assert agg.mean["nc"] == pytest.approx(0.75)
    assert agg.excluded == ["d: empty predicted mesh"]
    none = aggregate(reports[3:])
    assert all(math.isnan(v) for v in none.mean.values())

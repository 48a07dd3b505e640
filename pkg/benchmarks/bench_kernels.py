"""Compare the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N] [--json PATH]

Each kernel runs on identical inputs under both backends; outputs are
checked for bitwise equality before timings are reported.
"""

from __future__ import annotations

import argparse
import json
import sys
import timeit

import numpy as np

from mgpkad import _backend
from mgpkad.geometry import AnalyticShape, sdf_grid
from mgpkad.mctable import EDGE_OFFSETS, TRI_TABLE
from mgpkad.metrics import KDTree
from mgpkad.spline import uniform_grid


def cases():
    rng = np.random.default_rng(0)
    g = uniform_grid(-1.0, 1.0, 5, 3)
    x = rng.uniform(-1.2, 1.2, size=200_000)
    yield "bspline_basis (2e5 pts)", "bspline_basis", (x, g.knots, 3)
    yield "bspline_basis_deriv (2e5 pts)", "bspline_basis_deriv", (x, g.knots, 3)

    pts = rng.uniform(-1, 1, size=(10_000, 3))
    tree = KDTree(pts)
    q = np.ascontiguousarray(rng.uniform(-1, 1, size=(2_000, 3)))
    yield "kdtree_query (1e4 pts, 2e3 queries)", "kdtree_query", (tree.points, tree.perm, *tree._nodes, q)

    v = np.ascontiguousarray(sdf_grid(AnalyticShape("torus", (0.5, 0.15)), 64))
    yield "mc_triangles (64^3 torus)", "mc_triangles", (v, 0.0, TRI_TABLE, EDGE_OFFSETS)


def same(a, b) -> bool:
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.array_equal(a, b)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results to this file")
    args = ap.parse_args(argv)
    try:
        cy = _backend.kernels("cython")
    except ImportError:
        print("compiled kernels are not built; run `pip install -e . --no-build-isolation` first", file=sys.stderr)
        return 1
    py = _backend.kernels("python")

    rows = []
    print(f"{'kernel':40s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}  identical")
    for label, name, inputs in cases():
        f_py, f_cy = getattr(py, name), getattr(cy, name)
        t_py = min(timeit.repeat(lambda: f_py(*inputs), number=1, repeat=args.repeat)) * 1e3
        t_cy = min(timeit.repeat(lambda: f_cy(*inputs), number=1, repeat=args.repeat)) * 1e3
        ok = same(f_py(*inputs), f_cy(*inputs))
        rows.append({"kernel": label, "python_ms": t_py, "cython_ms": t_cy, "speedup": t_py / t_cy, "identical": ok})
        print(f"{label:40s} {t_py:10.2f} {t_cy:10.2f} {t_py / t_cy:7.1f}x  {ok}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0 if all(r["identical"] for r in rows) else 2


if __name__ == "__main__":
    sys.exit(main())

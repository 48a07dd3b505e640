"""Pure numpy/Python implementations of the compiled kernels.

Same signatures and the same floating-point operation order as ``_ckernels``,
so both backends return identical results.
"""

from __future__ import annotations

import numpy as np


def bspline_basis(x, knots, order):
    t = np.asarray(knots, dtype=np.float64)
    m = t.shape[0] - 1
    xc = np.clip(np.asarray(x, dtype=np.float64), t[0], t[-1])[:, None]
    N = ((xc >= t[None, :-1]) & (xc < t[None, 1:])).astype(np.float64)
    N[xc[:, 0] == t[-1], m - 1] = 1.0
    for d in range(1, order + 1):
        left = (xc - t[None, : m - d]) / (t[d:m] - t[: m - d]) * N[:, : m - d]
        right = (t[None, d + 1 : m + 1] - xc) / (t[d + 1 : m + 1] - t[1 : m - d + 1]) * N[:, 1 : m - d + 1]
        N = left + right
    return np.ascontiguousarray(N)


def bspline_basis_deriv(x, knots, order):
    t = np.asarray(knots, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    B = bspline_basis(x, t, order)
    n = B.shape[1]
    if order == 0:
        return B, np.zeros_like(B)
    lower = bspline_basis(x, t, order - 1)
    left = order / (t[order : order + n] - t[:n])
    right = order / (t[order + 1 : order + 1 + n] - t[1 : 1 + n])
    d = lower[:, :n] * left - lower[:, 1 : n + 1] * right
    d[(x < t[0]) | (x > t[-1])] = 0.0
    return B, np.ascontiguousarray(d)


def kdtree_query(pts, perm, start, end, axis, split, left, right, queries):
    nq = queries.shape[0]
    out_idx = np.empty(nq, dtype=np.int64)
    out_d2 = np.empty(nq, dtype=np.float64)
    for q in range(nq):
        qv = queries[q]
        best = np.inf
        best_idx = -1
        stack = [(0, 0.0)]
        while stack:
            node, bound = stack.pop()
            if bound > best:
                continue
            if left[node] < 0:
                s, e = start[node], end[node]
                d = qv - pts[s:e]
                dist = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]
                j = int(np.argmin(dist))
                dmin = dist[j]
                if dmin <= best:
                    cand = perm[s:e][dist == dmin].min()
                    if dmin < best or cand < best_idx:
                        best, best_idx = dmin, int(cand)
                continue
            diff = qv[axis[node]] - split[node]
            fb = max(diff * diff, bound)
            if diff < 0:
                stack.append((right[node], fb))
                stack.append((left[node], bound))
            else:
                stack.append((left[node], fb))
                stack.append((right[node], bound))
        out_idx[q] = best_idx
        out_d2[q] = best
    return out_idx, out_d2


def mc_triangles(v, iso, tri_table, edge_offsets):
    nx, ny, nz = v.shape
    if min(nx, ny, nz) < 2:
        return np.empty((0, 3), dtype=np.int64)
    inside = v < iso
    case = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.int32)
    for c in range(8):
        dx, dy, dz = c & 1, (c >> 1) & 1, (c >> 2) & 1
        case |= inside[dx : nx - 1 + dx, dy : ny - 1 + dy, dz : nz - 1 + dz].astype(np.int32) << c
    flat = case.ravel()
    ntri = (tri_table >= 0).sum(axis=1) // 3
    cells = np.nonzero(ntri[flat] > 0)[0]
    if cells.size == 0:
        return np.empty((0, 3), dtype=np.int64)
    cases = flat[cells]
    i, j, k = np.unravel_index(cells, case.shape)
    # one row per (cell, triangle slot) in cell-major order
    reps = ntri[cases]
    cell_rep = np.repeat(np.arange(cells.size), reps)
    slot = np.arange(cell_rep.size) - np.repeat(np.cumsum(reps) - reps, reps)
    edges = tri_table[cases[cell_rep][:, None], 3 * slot[:, None] + np.arange(3)[None, :]]
    off = edge_offsets[edges]
    ii = i[cell_rep][:, None] + off[..., 0]
    jj = j[cell_rep][:, None] + off[..., 1]
    kk = k[cell_rep][:, None] + off[..., 2]
    return (((ii * ny + jj) * nz + kk) * 3 + off[..., 3]).astype(np.int64)

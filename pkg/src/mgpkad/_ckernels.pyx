# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops. Each function mirrors one in ``_pykernels`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


cdef inline Py_ssize_t _find_span(const double* t, Py_ssize_t m, double x) noexcept nogil:
    # largest i with t[i] <= x, capped at the last interval
    cdef Py_ssize_t lo = 0, hi = m - 1, mid
    while lo < hi:
        mid = (lo + hi + 1) >> 1
        if t[mid] <= x:
            lo = mid
        else:
            hi = mid - 1
    return lo


cdef inline void _basis_row(const double* t, Py_ssize_t m, int order, double x, bint clamped,
                            double* N, double* out, double* der) noexcept nogil:
    # Cox-de Boor on the nonzero window only; ``der`` (may be NULL) gets the
    # derivative formed from the order-1 values before the last update.
    cdef Py_ssize_t nb = m - order, i, d, span, lo, hi
    cdef double left, right, kf = order
    span = _find_span(t, m, x)
    N[span] = 1.0
    for d in range(1, order + 1):
        if d == order and der != NULL and not clamped:
            lo = span - order
            if lo < 0:
                lo = 0
            for i in range(lo, span + 1):
                if i < nb:
                    der[i] = N[i] * (kf / (t[i + order] - t[i])) - N[i + 1] * (kf / (t[i + order + 1] - t[i + 1]))
        lo = span - d
        if lo < 0:
            lo = 0
        hi = span
        if hi > m - 1 - d:
            hi = m - 1 - d
        for i in range(lo, hi + 1):
            left = (x - t[i]) / (t[i + d] - t[i]) * N[i]
            right = (t[i + d + 1] - x) / (t[i + d + 1] - t[i + 1]) * N[i + 1]
            N[i] = left + right
        # entries above the valid range of this degree are stale
        for i in range(hi + 1, span + 1):
            N[i] = 0.0
    lo = span - order
    if lo < 0:
        lo = 0
    for i in range(lo, span + 1):
        if i < nb:
            out[i] = N[i]
        N[i] = 0.0


def bspline_basis(const double[::1] x, const double[::1] knots, int order):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t m = knots.shape[0] - 1
    cdef Py_ssize_t nb = m - order
    out_arr = np.zeros((n, nb), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[::1] N = np.zeros(m + 2, dtype=np.float64)
    cdef const double* t = &knots[0]
    cdef Py_ssize_t r
    cdef double xv
    cdef double t0 = t[0], tm = t[m]
    if n == 0:
        return out_arr
    with nogil:
        for r in range(n):
            xv = x[r]
            if xv < t0:
                xv = t0
            elif xv > tm:
                xv = tm
            _basis_row(t, m, order, xv, False, &N[0], &out[r, 0], NULL)
    return out_arr


def bspline_basis_deriv(const double[::1] x, const double[::1] knots, int order):
    """Basis and its x-derivative in one pass; the derivative is zero where x was clamped."""
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t m = knots.shape[0] - 1
    cdef Py_ssize_t nb = m - order
    out_arr = np.zeros((n, nb), dtype=np.float64)
    der_arr = np.zeros((n, nb), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[:, ::1] der = der_arr
    cdef double[::1] N = np.zeros(m + 2, dtype=np.float64)
    cdef const double* t = &knots[0]
    cdef Py_ssize_t r
    cdef double xv
    cdef double t0 = t[0], tm = t[m]
    cdef bint clamped
    if n == 0:
        return out_arr, der_arr
    with nogil:
        for r in range(n):
            xv = x[r]
            clamped = False
            if xv < t0:
                xv = t0
                clamped = True
            elif xv > tm:
                xv = tm
                clamped = True
            _basis_row(t, m, order, xv, clamped, &N[0], &out[r, 0], &der[r, 0])
    return out_arr, der_arr


def kdtree_query(const double[:, ::1] pts, const long[::1] perm,
                 const long[::1] start, const long[::1] end,
                 const long[::1] axis, const double[::1] split,
                 const long[::1] left, const long[::1] right,
                 const double[:, ::1] queries):
    cdef Py_ssize_t nq = queries.shape[0]
    idx_arr = np.empty(nq, dtype=np.int64)
    d2_arr = np.empty(nq, dtype=np.float64)
    cdef long[::1] out_idx = idx_arr
    cdef double[::1] out_d2 = d2_arr
    cdef Py_ssize_t cap = 2 * start.shape[0] + 2
    cdef long[::1] stack_node = np.empty(cap, dtype=np.int64)
    cdef double[::1] stack_bound = np.empty(cap, dtype=np.float64)
    cdef Py_ssize_t q, sp, node, p, ax
    cdef long best_idx, orig
    cdef double best, bound, dx, dy, dz, dist, diff, qx, qy, qz, fb
    with nogil:
        for q in range(nq):
            qx = queries[q, 0]
            qy = queries[q, 1]
            qz = queries[q, 2]
            best = INFINITY
            best_idx = -1
            sp = 0
            stack_node[0] = 0
            stack_bound[0] = 0.0
            sp = 1
            while sp > 0:
                sp -= 1
                node = stack_node[sp]
                bound = stack_bound[sp]
                if bound > best:
                    continue
                if left[node] < 0:
                    for p in range(start[node], end[node]):
                        dx = qx - pts[p, 0]
                        dy = qy - pts[p, 1]
                        dz = qz - pts[p, 2]
                        dist = dx * dx + dy * dy + dz * dz
                        orig = perm[p]
                        if dist < best or (dist == best and orig < best_idx):
                            best = dist
                            best_idx = orig
                    continue
                ax = axis[node]
                if ax == 0:
                    diff = qx - split[node]
                elif ax == 1:
                    diff = qy - split[node]
                else:
                    diff = qz - split[node]
                fb = diff * diff
                if fb < bound:
                    fb = bound
                if diff < 0:
                    stack_node[sp] = right[node]
                    stack_bound[sp] = fb
                    stack_node[sp + 1] = left[node]
                    stack_bound[sp + 1] = bound
                else:
                    stack_node[sp] = left[node]
                    stack_bound[sp] = fb
                    stack_node[sp + 1] = right[node]
                    stack_bound[sp + 1] = bound
                sp += 2
            out_idx[q] = best_idx
            out_d2[q] = best
    return idx_arr, d2_arr


def mc_triangles(const double[:, :, ::1] v, double iso,
                 const int[:, ::1] tri_table, const int[:, ::1] edge_offsets):
    cdef Py_ssize_t nx = v.shape[0], ny = v.shape[1], nz = v.shape[2]
    cdef Py_ssize_t i, j, k, c, s, e, count = 0, w = tri_table.shape[1]
    cdef int case
    cdef Py_ssize_t[8][3] corner
    for c in range(8):
        corner[c][0] = c & 1
        corner[c][1] = (c >> 1) & 1
        corner[c][2] = (c >> 2) & 1
    cdef int[::1] cases = np.zeros(max((nx - 1) * (ny - 1) * (nz - 1), 0), dtype=np.int32)
    cdef Py_ssize_t cell = 0
    with nogil:
        for i in range(nx - 1):
            for j in range(ny - 1):
                for k in range(nz - 1):
                    case = 0
                    for c in range(8):
                        if v[i + corner[c][0], j + corner[c][1], k + corner[c][2]] < iso:
                            case = case | (1 << c)
                    cases[cell] = case
                    s = 0
                    while s < w and tri_table[case, s] >= 0:
                        s += 1
                    count += s
                    cell += 1
    ids_arr = np.empty(count, dtype=np.int64)
    cdef long[::1] ids = ids_arr
    cdef Py_ssize_t pos = 0
    cell = 0
    with nogil:
        for i in range(nx - 1):
            for j in range(ny - 1):
                for k in range(nz - 1):
                    case = cases[cell]
                    cell += 1
                    s = 0
                    while s < w and tri_table[case, s] >= 0:
                        e = tri_table[case, s]
                        ids[pos] = (((i + edge_offsets[e, 0]) * ny + (j + edge_offsets[e, 1])) * nz
                                    + (k + edge_offsets[e, 2])) * 3 + edge_offsets[e, 3]
                        pos += 1
                        s += 1
    return ids_arr.reshape(-1, 3)

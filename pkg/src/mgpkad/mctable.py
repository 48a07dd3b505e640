"""Marching-cubes case table, generated from the cube topology at import.

Corner ``c`` of a cell sits at offset ``(c & 1, (c >> 1) & 1, (c >> 2) & 1)``.
A corner is *inside* when its value is below the iso level.  On faces with
two diagonal inside corners the inside corners are kept separate; because
the rule only looks at one face, neighbouring cells always agree and the
extracted surface is watertight.

Triangles are wound counter-clockwise when seen from the outside (positive)
side, so geometric normals point toward increasing field values.
"""

from __future__ import annotations

import numpy as np

CORNERS = np.array([(c & 1, (c >> 1) & 1, (c >> 2) & 1) for c in range(8)], dtype=np.int64)

# (corner_a, corner_b, axis); corner_a is the lower end of the edge.
EDGES = (
    (0, 1, 0), (2, 3, 0), (4, 5, 0), (6, 7, 0),
    (0, 2, 1), (1, 3, 1), (4, 6, 1), (5, 7, 1),
    (0, 4, 2), (1, 5, 2), (2, 6, 2), (3, 7, 2),
)

# Cyclic corner loops per face and the outward face normal.
FACES = (
    ((0, 2, 6, 4), (-1, 0, 0)),
    ((1, 3, 7, 5), (1, 0, 0)),
    ((0, 1, 5, 4), (0, -1, 0)),
    ((2, 3, 7, 6), (0, 1, 0)),
    ((0, 1, 3, 2), (0, 0, -1)),
    ((4, 5, 7, 6), (0, 0, 1)),
)

MAX_TRIS = 12


def _edge_index(a: int, b: int) -> int:
    lo, hi = min(a, b), max(a, b)
    for i, (ea, eb, _) in enumerate(EDGES):
        if (ea, eb) == (lo, hi):
            return i
    raise KeyError((a, b))


def _edge_midpoint(e: int) -> np.ndarray:
    a, b, _ = EDGES[e]
    return 0.5 * (CORNERS[a] + CORNERS[b]).astype(float)


def _face_segments(case: int) -> list[tuple[int, int]]:
    inside = [(case >> c) & 1 == 1 for c in range(8)]
    segments = []
    for loop, normal in FACES:
        normal = np.asarray(normal, dtype=float)
        crossings = []
        for s in range(4):
            a, b = loop[s], loop[(s + 1) % 4]
            if inside[a] != inside[b]:
                crossings.append(_edge_index(a, b))
        if not crossings:
            continue
        if len(crossings) == 2:
            ins = [CORNERS[c] for c in loop if inside[c]]
            out = [CORNERS[c] for c in loop if not inside[c]]
            pairs = [(crossings[0], crossings[1], np.mean(out, axis=0) - np.mean(ins, axis=0))]
        else:
            pairs = []
            for s, c in enumerate(loop):
                if not inside[c]:
                    continue
                e1 = _edge_index(loop[s - 1], c)
                e2 = _edge_index(c, loop[(s + 1) % 4])
                mid = 0.5 * (_edge_midpoint(e1) + _edge_midpoint(e2))
                pairs.append((e1, e2, mid - CORNERS[c]))
        for p, q, g in pairs:
            t = _edge_midpoint(q) - _edge_midpoint(p)
            if np.dot(t, np.cross(g, normal)) > 0:
                segments.append((p, q))
            else:
                segments.append((q, p))
    return segments


def _case_triangles(case: int) -> list[tuple[int, int, int]]:
    nxt = {}
    for p, q in _face_segments(case):
        if p in nxt:
            raise AssertionError(f"case {case}: edge {p} starts two segments")
        nxt[p] = q
    tris = []
    remaining = dict(nxt)
    while remaining:
        start = min(remaining)
        loop = [start]
        cur = remaining.pop(start)
        while cur != start:
            loop.append(cur)
            cur = remaining.pop(cur)
        for i in range(1, len(loop) - 1):
            tris.append((loop[0], loop[i], loop[i + 1]))
    return tris


def build_tables() -> tuple[np.ndarray, np.ndarray]:
    """Return ``(tri_table, edge_offsets)``.

    ``tri_table`` is ``(256, 3 * MAX_TRIS)`` int32 padded with -1.
    ``edge_offsets`` is ``(12, 4)`` int32 rows ``(dx, dy, dz, axis)`` locating
    each cell edge by its lower grid node.
    """
    table = -np.ones((256, 3 * MAX_TRIS), dtype=np.int32)
    for case in range(256):
        flat = [e for tri in _case_triangles(case) for e in tri]
        table[case, : len(flat)] = flat
    offsets = np.array([tuple(CORNERS[a]) + (axis,) for a, _, axis in EDGES], dtype=np.int32)
    return table, offsets


TRI_TABLE, EDGE_OFFSETS = build_tables()

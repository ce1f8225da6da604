"""Exact nearest-neighbour search over 3D points with a balanced k-d tree.

The tree is stored as flat arrays so that construction and queries can run
under numba without touching Python objects. Every node keeps its tight
bounding box; the search prunes a subtree only when the squared distance to
its box is strictly larger than the best candidate, which keeps equidistant
points reachable so the lowest-source-index tie rule is honoured exactly.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from ..cloud import PointCloud, as_points

LEAF_SIZE = 8
_STACK_DEPTH = 256


@njit(cache=True, nogil=True)
def _build(points, leaf_size):
    n = points.shape[0]
    order = np.arange(n)
    max_nodes = 2 * ((n + leaf_size - 1) // leaf_size) * 2 + 1
    lo = np.empty(max_nodes, np.int64)
    hi = np.empty(max_nodes, np.int64)
    left = np.full(max_nodes, -1, np.int64)
    right = np.full(max_nodes, -1, np.int64)
    bmin = np.empty((max_nodes, 3))
    bmax = np.empty((max_nodes, 3))

    stack = np.empty(_STACK_DEPTH, np.int64)
    sp = 0
    lo[0] = 0
    hi[0] = n
    count = 1
    stack[sp] = 0
    sp += 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        a = lo[node]
        b = hi[node]
        for k in range(3):
            bmin[node, k] = np.inf
            bmax[node, k] = -np.inf
        for t in range(a, b):
            i = order[t]
            for k in range(3):
                v = points[i, k]
                if v < bmin[node, k]:
                    bmin[node, k] = v
                if v > bmax[node, k]:
                    bmax[node, k] = v
        if b - a <= leaf_size:
            continue
        axis = 0
        widest = bmax[node, 0] - bmin[node, 0]
        for k in range(1, 3):
            ext = bmax[node, k] - bmin[node, k]
            if ext > widest:
                widest = ext
                axis = k
        # stable sort of index-sorted members: equal coordinates keep index order
        members = np.sort(order[a:b])
        keys = np.empty(b - a)
        for t in range(b - a):
            keys[t] = points[members[t], axis]
        perm = np.argsort(keys, kind="mergesort")
        for t in range(b - a):
            order[a + t] = members[perm[t]]
        mid = (a + b) // 2
        l_node = count
        r_node = count + 1
        count += 2
        lo[l_node] = a
        hi[l_node] = mid
        lo[r_node] = mid
        hi[r_node] = b
        left[node] = l_node
        right[node] = r_node
        stack[sp] = r_node
        stack[sp + 1] = l_node
        sp += 2
    return order, lo[:count], hi[:count], left[:count], right[:count], bmin[:count], bmax[:count]


@njit(cache=True, nogil=True)
def _box_d2(q0, q1, q2, bmin, bmax, node):
    d = 0.0
    g = bmin[node, 0] - q0
    if g > 0.0:
        d += g * g
    else:
        g = q0 - bmax[node, 0]
        if g > 0.0:
            d += g * g
    g = bmin[node, 1] - q1
    if g > 0.0:
        d += g * g
    else:
        g = q1 - bmax[node, 1]
        if g > 0.0:
            d += g * g
    g = bmin[node, 2] - q2
    if g > 0.0:
        d += g * g
    else:
        g = q2 - bmax[node, 2]
        if g > 0.0:
            d += g * g
    return d


@njit(cache=True, nogil=True)
def _query(points, order, lo, hi, left, right, bmin, bmax, queries, out_idx, out_d2):
    stack = np.empty(_STACK_DEPTH, np.int64)
    n_big = points.shape[0]
    for qi in range(queries.shape[0]):
        q0 = queries[qi, 0]
        q1 = queries[qi, 1]
        q2 = queries[qi, 2]
        best = np.inf
        best_i = n_big
        sp = 0
        stack[sp] = 0
        sp += 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            if _box_d2(q0, q1, q2, bmin, bmax, node) > best:
                continue
            l_node = left[node]
            if l_node == -1:
                for t in range(lo[node], hi[node]):
                    i = order[t]
                    dx = points[i, 0] - q0
                    dy = points[i, 1] - q1
                    dz = points[i, 2] - q2
                    d2 = dx * dx + dy * dy + dz * dz
                    if d2 < best or (d2 == best and i < best_i):
                        best = d2
                        best_i = i
                continue
            r_node = right[node]
            dl = _box_d2(q0, q1, q2, bmin, bmax, l_node)
            dr = _box_d2(q0, q1, q2, bmin, bmax, r_node)
            # push the farther child first so the nearer one is explored first
            if dl <= dr:
                stack[sp] = r_node
                stack[sp + 1] = l_node
            else:
                stack[sp] = l_node
                stack[sp + 1] = r_node
            sp += 2
        out_idx[qi] = best_i
        out_d2[qi] = best


class NnIndex:
    """Immutable k-d tree over the points of a cloud.

    Construction splits at the median of the widest bounding-box axis
    (ties to the lower axis id; equal coordinates ordered by source index).
    Queries are exact and return the lowest source index among equidistant
    neighbours.
    """

    __slots__ = ("_points", "_order", "_lo", "_hi", "_left", "_right", "_bmin", "_bmax")

    def __init__(self, cloud):
        pts = np.ascontiguousarray(as_points(cloud), dtype=np.float64)
        if pts.shape[0] == 0:
            raise ValueError("cannot index an empty cloud")
        self._points = pts
        self._points.setflags(write=False)
        built = _build(pts, LEAF_SIZE)
        (self._order, self._lo, self._hi, self._left, self._right,
         self._bmin, self._bmax) = built

    def __len__(self) -> int:
        return self._points.shape[0]

    @property
    def points(self) -> np.ndarray:
        return self._points

    def query(self, queries) -> tuple[np.ndarray, np.ndarray]:
        """Nearest neighbour of every row in ``queries``.

        Returns ``(indices, squared_distances)``; squared distances avoid a
        redundant square root for the L2 metrics.
        """
        q = np.ascontiguousarray(np.asarray(queries, dtype=np.float64).reshape(-1, 3))
        idx = np.empty(q.shape[0], np.int64)
        d2 = np.empty(q.shape[0], np.float64)
        _query(self._points, self._order, self._lo, self._hi, self._left,
               self._right, self._bmin, self._bmax, q, idx, d2)
        return idx, d2

    def nearest(self, q) -> tuple[int, float]:
        idx, d2 = self.query(np.asarray(q, dtype=np.float64).reshape(1, 3))
        return int(idx[0]), float(np.sqrt(d2[0]))


def build_index(cloud: PointCloud | np.ndarray) -> NnIndex:
    return NnIndex(cloud)


def nearest(index: NnIndex, q) -> tuple[int, float]:
    """Exact nearest neighbour of ``q``: ``(source index, euclidean distance)``."""
    return index.nearest(q)

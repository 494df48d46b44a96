"""Exact nearest-neighbour and fixed-radius queries.

A kd-tree answers both query types.  Every candidate distance is computed
exactly (squared Euclidean, coordinates summed left to right) and results
are ordered by ``(distance, row index)``, so the tree path returns the same
index lists as an exhaustive scan.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._accel import kernels as _k

__all__ = ["NeighborIndex", "PoolingSpec", "build_index", "k_nearest", "within_radius"]

LEAF_SIZE = 16


@dataclass(frozen=True)
class PoolingSpec:
    """Which calibration points correct a query.

    ``mode`` is ``"radius"`` (ball of diameter ``xi`` around the query),
    ``"count"`` (the ``m`` nearest points) or ``"all"``.
    """

    mode: str = "all"
    xi: Optional[float] = None
    m: Optional[int] = None

    def __post_init__(self):
        if self.mode == "radius":
            if self.xi is None or not self.xi > 0:
                raise ValueError(f"radius pooling needs xi > 0, got {self.xi!r}")
        elif self.mode == "count":
            if self.m is None or int(self.m) != self.m or self.m < 1:
                raise ValueError(f"count pooling needs an integer m >= 1, got {self.m!r}")
            object.__setattr__(self, "m", int(self.m))
        elif self.mode != "all":
            raise ValueError(f"unknown pooling mode {self.mode!r}; expected radius, count or all")

    @classmethod
    def radius(cls, xi: float) -> "PoolingSpec":
        return cls("radius", xi=float(xi))

    @classmethod
    def count(cls, m: int) -> "PoolingSpec":
        return cls("count", m=m)

    @classmethod
    def all(cls) -> "PoolingSpec":
        return cls("all")

    @property
    def size_key(self) -> float:
        """Sort key for tie-breaking (smaller pools first, ``all`` last)."""
        if self.mode == "radius":
            return float(self.xi)
        if self.mode == "count":
            return float(self.m)
        return math.inf

    def label(self) -> str:
        if self.mode == "radius":
            return f"xi={self.xi:g}"
        if self.mode == "count":
            return str(self.m)
        return "all"


class NeighborIndex:
    """kd-tree over a fixed point set with a brute-force path kept alongside.

    Parameters
    ----------
    points : array_like, shape (n, d)
        Coordinates, already standardized if that is wanted.
    leaf_size : int
        Maximum number of points in a leaf.
    """

    def __init__(self, points, leaf_size: int = LEAF_SIZE):
        P = np.array(points, dtype=float, copy=True)
        if P.ndim == 1:
            P = P[:, None]
        if P.ndim != 2 or P.shape[0] < 1:
            raise ValueError("NeighborIndex needs at least one point")
        if not np.all(np.isfinite(P)):
            raise ValueError("non-finite coordinates")
        P = np.ascontiguousarray(P)
        P.flags.writeable = False
        self.points = P
        self.leaf_size = max(int(leaf_size), 1)
        self._build()

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    def _build(self):
        P = self.points
        perm = np.arange(self.n, dtype=np.int64)
        start, end, left, right, lo, hi = [], [], [], [], [], []

        def new_node(s, e):
            idx = perm[s:e]
            start.append(s)
            end.append(e)
            left.append(-1)
            right.append(-1)
            lo.append(P[idx].min(axis=0))
            hi.append(P[idx].max(axis=0))
            return len(start) - 1

        stack = [new_node(0, self.n)]
        while stack:
            node = stack.pop()
            s, e = start[node], end[node]
            if e - s <= self.leaf_size:
                continue
            spread = hi[node] - lo[node]
            dim = int(np.argmax(spread))
            if spread[dim] <= 0.0:
                continue  # all points identical
            seg = perm[s:e]
            order = np.argsort(P[seg, dim], kind="stable")
            perm[s:e] = seg[order]
            mid = s + (e - s) // 2
            a = new_node(s, mid)
            b = new_node(mid, e)
            left[node], right[node] = a, b
            stack.extend((b, a))

        self._perm = perm
        self._start = np.asarray(start, dtype=np.int64)
        self._end = np.asarray(end, dtype=np.int64)
        self._left = np.asarray(left, dtype=np.int64)
        self._right = np.asarray(right, dtype=np.int64)
        self._lo = np.ascontiguousarray(lo, dtype=float)
        self._hi = np.ascontiguousarray(hi, dtype=float)

    def _tree(self):
        return (self.points, self._perm, self._start, self._end, self._left, self._right,
                self._lo, self._hi)

    def _queries(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :] if self.d > 1 or X.size == 1 else X[:, None]
        if X.ndim != 2 or X.shape[1] != self.d:
            raise ValueError(f"query dimension {X.shape[-1]} does not match index dimension {self.d}")
        return np.ascontiguousarray(X)

    # -- count queries -------------------------------------------------
    def k_nearest_batch(self, X, m: int, *, return_distance: bool = False, brute: bool = False):
        """Indices of the ``m`` nearest points for each query row, shape (q, m)."""
        m = int(m)
        if m < 1:
            raise ValueError("m must be at least 1")
        if m > self.n:
            raise ValueError(f"m={m} exceeds the {self.n} indexed points")
        Q = self._queries(X)
        if brute:
            idx = np.empty((Q.shape[0], m), dtype=np.int64)
            d2 = np.empty((Q.shape[0], m))
            for r in range(Q.shape[0]):
                dist = _k.sqdist_rows(self.points, Q[r])
                order = np.lexsort((np.arange(self.n), dist))[:m]
                idx[r], d2[r] = order, dist[order]
        else:
            idx, d2 = _k.kdtree_knn(*self._tree(), Q, m)
        return (idx, d2) if return_distance else idx

    def k_nearest(self, x, m: int, *, brute: bool = False) -> np.ndarray:
        return self.k_nearest_batch(np.atleast_2d(np.asarray(x, dtype=float).reshape(1, -1)),
                                    m, brute=brute)[0]

    # -- radius queries ------------------------------------------------
    def within_radius_batch(self, X, xi: float, *, brute: bool = False):
        """CSR ``(indptr, indices)`` of points within ``xi / 2`` of each query."""
        xi = float(xi)
        if not xi > 0:
            raise ValueError(f"xi must be positive, got {xi!r}")
        Q = self._queries(X)
        r2 = math.inf if math.isinf(xi) else (0.5 * xi) ** 2
        if brute:
            indptr = np.zeros(Q.shape[0] + 1, dtype=np.int64)
            parts = []
            for r in range(Q.shape[0]):
                dist = _k.sqdist_rows(self.points, Q[r])
                hit = np.nonzero(dist <= r2)[0]
                hit = hit[np.lexsort((hit, dist[hit]))]
                parts.append(hit)
                indptr[r + 1] = indptr[r] + hit.size
            indices = np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)
            return indptr, indices.astype(np.int64)
        indptr, indices, _ = _k.kdtree_radius(*self._tree(), Q, r2)
        return indptr, indices

    def within_radius(self, x, xi: float, *, brute: bool = False) -> np.ndarray:
        indptr, indices = self.within_radius_batch(
            np.asarray(x, dtype=float).reshape(1, -1), xi, brute=brute)
        return indices[indptr[0]:indptr[1]]


def build_index(points, leaf_size: int = LEAF_SIZE) -> NeighborIndex:
    return NeighborIndex(points, leaf_size)


def k_nearest(index: NeighborIndex, x, m: int) -> np.ndarray:
    """``m`` row indices sorted by (distance, index)."""
    return index.k_nearest(x, m)


def within_radius(index: NeighborIndex, x, xi: float) -> np.ndarray:
    """Rows inside the closed ball of diameter ``xi`` centred at ``x``."""
    return index.within_radius(x, xi)

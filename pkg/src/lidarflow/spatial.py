"""Spatial search and voxelization.

``KdIndex`` wraps a scipy kd-tree but pins down the semantics the rest of
the library relies on: results identical to a brute-force scan, with ties
broken by the lower point index.
"""

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyIndex


class KdIndex:
    """Read-only spatial index over a snapshot of an (n, 3) cloud."""

    def __init__(self, points):
        self.points = np.ascontiguousarray(points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError("KdIndex expects an (n, 3) array")
        self.n = len(self.points)
        self._tree = cKDTree(self.points) if self.n else None

    def knn(self, query, k):
        """Indices of the k nearest points, nearest first.

        Exact brute-force semantics: when the k-th distance is tied, the
        lower point indices win. Accepts a single query point.
        """
        if self.n == 0:
            raise EmptyIndex("knn on empty index")
        if not 1 <= k <= self.n:
            raise ValueError(f"k={k} out of range for n={self.n}")
        q = np.asarray(query, dtype=np.float64).reshape(3)
        dist, idx = self._tree.query(q, k=k)
        dist = np.atleast_1d(dist)
        idx = np.atleast_1d(idx)
        # resolve possible ties at the boundary deterministically
        cutoff = dist[-1]
        tied = self._tree.query_ball_point(q, cutoff * (1 + 1e-12) + 1e-300)
        if len(tied) > k:
            tied = np.asarray(tied, dtype=np.int64)
            d = np.linalg.norm(self.points[tied] - q, axis=1)
            order = np.lexsort((tied, d))
            return tied[order[:k]]
        order = np.lexsort((idx, dist))
        return idx[order].astype(np.int64)

    def knn_batch(self, queries, k):
        """k nearest for many queries at once; no boundary-tie resolution.

        Fast path for randomized float data where exact ties at the k-th
        neighbor do not occur.
        """
        if self.n == 0:
            raise EmptyIndex("knn on empty index")
        q = np.asarray(queries, dtype=np.float64)
        dist, idx = self._tree.query(q, k=k)
        if k == 1:
            dist = dist[:, None]
            idx = idx[:, None]
        return dist, idx.astype(np.int64)

    def nearest(self, queries):
        """Distance and index of the single nearest point per query row."""
        if self.n == 0:
            raise EmptyIndex("nearest on empty index")
        dist, idx = self._tree.query(np.asarray(queries, dtype=np.float64))
        return np.atleast_1d(dist), np.atleast_1d(idx).astype(np.int64)

    def radius(self, query, r):
        """All point indices within distance r (inclusive), ascending."""
        if r <= 0:
            raise ValueError("radius must be positive")
        if self.n == 0:
            return np.empty(0, dtype=np.int64)
        hits = self._tree.query_ball_point(
            np.asarray(query, dtype=np.float64).reshape(3), r
        )
        return np.sort(np.asarray(hits, dtype=np.int64))

    def radius_batch(self, queries, r):
        """Per-row neighbor lists within distance r, each sorted ascending."""
        if r <= 0:
            raise ValueError("radius must be positive")
        if self.n == 0:
            return [np.empty(0, dtype=np.int64) for _ in range(len(queries))]
        hits = self._tree.query_ball_point(
            np.asarray(queries, dtype=np.float64), r
        )
        return [np.sort(np.asarray(h, dtype=np.int64)) for h in hits]


class VoxelGrid:
    """Occupied-cell map of a cloud: cell key -> (centroid, count).

    Keys are per-axis ``floor(coord / size)`` anchored at the origin.
    """

    def __init__(self, points, size):
        if size <= 0:
            raise ValueError("voxel size must be positive")
        pts = np.asarray(points, dtype=np.float64)
        self.size = float(size)
        if len(pts) == 0:
            self.keys = np.empty((0, 3), dtype=np.int64)
            self.centroids = np.empty((0, 3))
            self.counts = np.empty(0, dtype=np.int64)
            self.cell_of_point = np.empty(0, dtype=np.int64)
            return
        keys = np.floor(pts / self.size).astype(np.int64)
        uniq, inverse, counts = np.unique(
            keys, axis=0, return_inverse=True, return_counts=True
        )
        sums = np.zeros((len(uniq), 3))
        np.add.at(sums, inverse, pts)
        self.keys = uniq
        self.centroids = sums / counts[:, None]
        self.counts = counts
        self.cell_of_point = inverse.astype(np.int64)

    @property
    def n_cells(self):
        return len(self.keys)


def voxelize(points, size):
    """Build the occupied-voxel grid of a cloud."""
    return VoxelGrid(points, size)

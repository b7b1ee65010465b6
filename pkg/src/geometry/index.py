"""Exact nearest-neighbor queries over a fixed point set."""

from __future__ import annotations

import numpy as np
import numpy.typing as npt
from scipy.spatial import cKDTree

from src.core.errors import EmptyCloudError, InputError
from src.geometry.cloud import FloatArray, PointCloud

IntArray = npt.NDArray[np.intp]

# Candidates fetched per query before exact re-ranking; covers near-ties from tree rounding.
_TIE_WINDOW = 2


class NearestNeighborIndex:
    """k-d tree over one point set (any dimension).

    Queries return the indexed point with the smallest squared Euclidean distance,
    recomputed exactly from coordinates; equal distances resolve to the lowest index.
    """

    def __init__(self, points: FloatArray):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise EmptyCloudError()
        if not np.all(np.isfinite(pts)):
            raise InputError("index points must be finite")
        self._points = pts
        self._tree = cKDTree(pts)

    @classmethod
    def from_cloud(cls, cloud: PointCloud) -> NearestNeighborIndex:
        return cls(cloud.points)

    @property
    def points(self) -> FloatArray:
        return self._points

    def __len__(self) -> int:
        return int(self._points.shape[0])

    def query(self, queries: FloatArray) -> tuple[IntArray, FloatArray]:
        """Return (indices, squared distances) of the nearest indexed point per query row."""
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        if q.shape[0] == 0:
            return np.empty(0, dtype=np.intp), np.empty(0)
        n = len(self)
        k = min(_TIE_WINDOW, n)
        _, idx = self._tree.query(q, k=k, workers=-1)
        idx = np.asarray(idx, dtype=np.intp).reshape(q.shape[0], k)

        diff = self._points[idx] - q[:, None, :]
        sq = np.einsum("ijk,ijk->ij", diff, diff)
        best = sq.min(axis=1)
        nearest = np.where(sq == best[:, None], idx, n).min(axis=1)

        if k < n:
            # Every fetched candidate tied: more ties may sit outside the window.
            saturated = np.flatnonzero(sq[:, -1] == best)
            for row in saturated:
                nearest[row] = self._resolve_ties(q[row], float(best[row]))
        return nearest, best

    def query_point(self, point: npt.ArrayLike) -> FloatArray:
        idx, _ = self.query(np.asarray(point, dtype=np.float64)[None, :])
        return np.asarray(self._points[idx[0]])

    def _resolve_ties(self, point: FloatArray, best_sq: float) -> int:
        radius = float(np.sqrt(best_sq)) * (1.0 + 1e-9) + 1e-300
        cand = np.asarray(self._tree.query_ball_point(point, r=radius), dtype=np.intp)
        diff = self._points[cand] - point
        sq = np.einsum("ij,ij->i", diff, diff)
        return int(cand[sq == sq.min()].min())


def build_index(cloud: PointCloud) -> NearestNeighborIndex:
    if cloud.is_empty:
        raise EmptyCloudError()
    return NearestNeighborIndex.from_cloud(cloud)

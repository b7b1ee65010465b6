"""Chamfer distance and F-score between point sets."""

import numpy as np

from src.core.errors import EmptyCloudError, InputError
from src.geometry.cloud import FloatArray, PointCloud
from src.geometry.index import NearestNeighborIndex


def _as_points(points: FloatArray) -> FloatArray:
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise EmptyCloudError()
    return arr


def chamfer_arrays(
    a: FloatArray,
    b: FloatArray,
    index_a: NearestNeighborIndex | None = None,
    index_b: NearestNeighborIndex | None = None,
) -> float:
    """Bidirectional mean squared nearest-neighbor distance for point sets of any dimension."""
    a = _as_points(a)
    b = _as_points(b)
    if a.shape[1] != b.shape[1]:
        raise InputError("point sets must share a dimension")
    index_a = index_a or NearestNeighborIndex(a)
    index_b = index_b or NearestNeighborIndex(b)
    _, forward = index_b.query(a)
    _, backward = index_a.query(b)
    return float(forward.mean() + backward.mean())


def chamfer_distance(a: PointCloud, b: PointCloud) -> float:
    return chamfer_arrays(a.require_non_empty().points, b.require_non_empty().points)


def precision_recall(pred: FloatArray, gt: FloatArray, threshold: float) -> tuple[float, float]:
    pred = _as_points(pred)
    gt = _as_points(gt)
    if not threshold > 0:
        raise InputError("threshold must be positive")
    _, to_gt = NearestNeighborIndex(gt).query(pred)
    _, to_pred = NearestNeighborIndex(pred).query(gt)
    limit = threshold * threshold
    return float(np.mean(to_gt <= limit)), float(np.mean(to_pred <= limit))


def f_score_arrays(pred: FloatArray, gt: FloatArray, threshold: float) -> float:
    precision, recall = precision_recall(pred, gt, threshold)
    if precision + recall == 0:
        return 0.0
    return 200.0 * precision * recall / (precision + recall)


def f_score(pred: PointCloud, gt: PointCloud, threshold: float) -> float:
    """F-score on the 0-100 scale at a Euclidean distance threshold."""
    return f_score_arrays(pred.points, gt.points, threshold)

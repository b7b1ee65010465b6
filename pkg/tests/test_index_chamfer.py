import numpy as np
import pytest

from src.core.errors import EmptyCloudError
from src.geometry.cloud import PointCloud
from src.geometry.index import NearestNeighborIndex, build_index
from src.metrics.pointcloud import (
    chamfer_arrays,
    chamfer_distance,
    f_score,
    f_score_arrays,
    precision_recall,
)


def brute_sq(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def brute_chamfer(a: np.ndarray, b: np.ndarray) -> float:
    sq = brute_sq(a, b)
    return float(sq.min(axis=1).mean() + sq.min(axis=0).mean())


def test_query_examples() -> None:
    index = NearestNeighborIndex(np.array([[0.0, 0, 0], [5.0, 5, 5]]))
    np.testing.assert_array_equal(index.query_point([1.0, 0, 0]), [0.0, 0, 0])

    single = build_index(PointCloud(np.array([[1.0, 2, 3]])))
    np.testing.assert_array_equal(single.query_point([-40.0, 7, 0.5]), [1.0, 2, 3])


def test_query_matches_linear_scan(rng: np.random.Generator) -> None:
    points = rng.uniform(size=(256, 3))
    queries = rng.uniform(-0.2, 1.2, size=(100, 3))
    indices, sq = NearestNeighborIndex(points).query(queries)
    expected = brute_sq(queries, points)
    np.testing.assert_array_equal(indices, expected.argmin(axis=1))
    np.testing.assert_allclose(sq, expected.min(axis=1), rtol=1e-12)


def test_ties_resolve_to_lowest_index() -> None:
    points = np.array([[1.0, 0, 0], [0.0, 0, 0], [1.0, 0, 0], [0.0, 0, 0]])
    indices, sq = NearestNeighborIndex(points).query(np.array([[0.5, 0, 0]]))
    assert indices[0] == 0
    assert sq[0] == 0.25

    duplicates = NearestNeighborIndex(np.array([[2.0, 0, 0], [1.0, 0, 0], [1.0, 0, 0]]))
    assert duplicates.query(np.array([[1.0, 0, 0]]))[0][0] == 1


def test_index_works_in_two_dimensions(rng: np.random.Generator) -> None:
    points = rng.uniform(size=(64, 2))
    queries = rng.uniform(size=(16, 2))
    indices, _ = NearestNeighborIndex(points).query(queries)
    np.testing.assert_array_equal(indices, brute_sq(queries, points).argmin(axis=1))


def test_empty_index_rejected() -> None:
    with pytest.raises(EmptyCloudError):
        NearestNeighborIndex(np.empty((0, 3)))
    with pytest.raises(EmptyCloudError):
        build_index(PointCloud(np.empty((0, 3))))


def test_chamfer_examples(rng: np.random.Generator) -> None:
    cloud = PointCloud(rng.normal(size=(40, 3)))
    assert chamfer_distance(cloud, cloud) == 0.0
    origin = PointCloud(np.array([[0.0, 0, 0]]))
    assert chamfer_distance(origin, PointCloud(np.array([[1.0, 0, 0]]))) == 2.0
    pair = PointCloud(np.array([[0.0, 0, 0], [2.0, 0, 0]]))
    assert chamfer_distance(pair, PointCloud(np.array([[1.0, 0, 0]]))) == 2.0


def test_chamfer_matches_brute_force(rng: np.random.Generator) -> None:
    for _ in range(200):
        n, m = rng.integers(1, 1025, size=2)
        a = rng.uniform(size=(n, 3))
        b = rng.uniform(size=(m, 3))
        expected = brute_chamfer(a, b)
        assert chamfer_arrays(a, b) == pytest.approx(expected, rel=1e-9)
        assert chamfer_arrays(b, a) == pytest.approx(expected, rel=1e-9)


def test_chamfer_rejects_empty() -> None:
    with pytest.raises(EmptyCloudError):
        chamfer_distance(PointCloud(np.empty((0, 3))), PointCloud(np.zeros((1, 3))))


def test_f_score_examples(rng: np.random.Generator) -> None:
    cloud = PointCloud(rng.uniform(size=(50, 3)))
    assert f_score(cloud, cloud, 0.01) == 100.0
    far = f_score(
        PointCloud(np.array([[0.0, 0, 0]])), PointCloud(np.array([[10.0, 0, 0]])), 0.01
    )
    assert far == 0.0


def test_f_score_matches_brute_force(rng: np.random.Generator) -> None:
    pred = rng.uniform(size=(128, 3))
    gt = rng.uniform(size=(128, 3))
    sq = brute_sq(pred, gt)
    precision = float(np.mean(sq.min(axis=1) <= 0.05**2))
    recall = float(np.mean(sq.min(axis=0) <= 0.05**2))
    assert precision_recall(pred, gt, 0.05) == (precision, recall)
    expected = 200 * precision * recall / (precision + recall) if precision + recall else 0.0
    assert f_score_arrays(pred, gt, 0.05) == pytest.approx(expected, rel=1e-12)

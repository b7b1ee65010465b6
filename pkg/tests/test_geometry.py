import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from src.core.errors import DegenerateCloudError, EmptyCloudError, InputError
from src.geometry.cloud import (
    EulerRotation,
    LayoutParams,
    PointCloud,
    apply_transform,
    axis_rotations,
    denormalize_cloud,
    inverse_transform,
    normalize_cloud,
    rotation_geodesic_error,
    rotation_matrix,
    rotation_matrix_geodesic_error,
    rotation_matrix_partials,
)


def test_point_cloud_validates_shape_and_finiteness() -> None:
    assert PointCloud(np.empty((0, 3))).is_empty
    with pytest.raises(InputError):
        PointCloud(np.zeros((4, 2)))
    with pytest.raises(InputError, match="point 1"):
        PointCloud(np.array([[0.0, 0.0, 0.0], [np.nan, 0.0, 0.0]]))
    with pytest.raises(EmptyCloudError):
        PointCloud(np.empty((0, 3))).centroid()


def test_point_cloud_is_read_only() -> None:
    cloud = PointCloud(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        cloud.points[0, 0] = 1.0


def test_rotation_matrix_is_z_y_x_product(rng: np.random.Generator) -> None:
    for angles in rng.uniform(-math.pi, math.pi, size=(20, 3)):
        mx, my, mz = axis_rotations(*angles)
        expected = mz @ my @ mx
        np.testing.assert_allclose(rotation_matrix(*angles), expected, atol=1e-12)


def test_rotation_partials_match_finite_differences(rng: np.random.Generator) -> None:
    h = 1e-6
    angles = rng.uniform(-math.pi, math.pi, size=3)
    partials = rotation_matrix_partials(*angles)
    for axis in range(3):
        step = np.zeros(3)
        step[axis] = h
        numeric = (rotation_matrix(*(angles + step)) - rotation_matrix(*(angles - step))) / (2 * h)
        np.testing.assert_allclose(partials[axis], numeric, atol=1e-8)


def test_apply_transform_examples() -> None:
    p = PointCloud(np.array([[1.0, 1.0, 1.0]]))
    assert np.array_equal(apply_transform(p, LayoutParams.identity()).points, p.points)

    scaled = apply_transform(p, LayoutParams(t=(1.0, 0.0, 0.0), s=2.0))
    np.testing.assert_array_equal(scaled.points, [[3.0, 2.0, 2.0]])

    quarter = apply_transform(
        PointCloud(np.array([[1.0, 0.0, 0.0]])),
        LayoutParams(r=EulerRotation(rz=math.pi / 2)),
    )
    np.testing.assert_allclose(quarter.points, [[0.0, 1.0, 0.0]], atol=1e-12)


def test_inverse_transform_undoes_apply(rng: np.random.Generator) -> None:
    cloud = PointCloud(rng.normal(size=(50, 3)))
    params = LayoutParams.from_vector([0.3, -0.2, 2.0, 0.4, -1.1, 2.5, 1.7])
    restored = inverse_transform(apply_transform(cloud, params), params)
    np.testing.assert_allclose(restored.points, cloud.points, atol=1e-12)


def test_layout_params_reject_non_positive_scale() -> None:
    with pytest.raises(InputError):
        LayoutParams(s=0.0)
    with pytest.raises(InputError):
        LayoutParams.from_vector([0, 0, 0, 0, 0, 0, -1])


def test_normalize_cloud_example() -> None:
    normalized, record = normalize_cloud(PointCloud(np.array([[2.0, 0, 0], [4.0, 0, 0]])))
    np.testing.assert_allclose(normalized.points, [[-0.5, 0, 0], [0.5, 0, 0]])
    np.testing.assert_allclose(record.centroid, [3.0, 0.0, 0.0])
    assert record.divisor == 2.0


def test_normalize_is_idempotent_and_invertible(rng: np.random.Generator) -> None:
    cloud = PointCloud(rng.uniform(-3, 5, size=(200, 3)))
    once, record = normalize_cloud(cloud)
    twice, _ = normalize_cloud(once)
    np.testing.assert_allclose(twice.points, once.points, atol=1e-12)
    np.testing.assert_allclose(denormalize_cloud(once, record).points, cloud.points, atol=1e-9)


def test_normalize_rejects_zero_extent() -> None:
    with pytest.raises(DegenerateCloudError, match="zero extent"):
        normalize_cloud(PointCloud(np.ones((5, 3))))


def test_geodesic_error_examples() -> None:
    assert rotation_geodesic_error(EulerRotation(), EulerRotation()) == 0.0
    assert rotation_geodesic_error(EulerRotation(), EulerRotation(rz=math.pi)) == pytest.approx(
        math.pi
    )


def test_geodesic_error_matches_trace_angle(rng: np.random.Generator) -> None:
    for _ in range(100):
        a, b = rng.uniform(-math.pi, math.pi, size=(2, 3))
        ma, mb = (Rotation.from_euler("xyz", v).as_matrix() for v in (a, b))
        cos_angle = (np.trace(ma.T @ mb) - 1.0) / 2.0
        expected = math.acos(min(1.0, max(-1.0, cos_angle)))
        assert rotation_geodesic_error(EulerRotation(*a), EulerRotation(*b)) == pytest.approx(
            expected, abs=1e-7
        )


def test_geodesic_error_ignores_a_shared_right_factor(rng: np.random.Generator) -> None:
    for _ in range(20):
        a, b, c = (rotation_matrix(*v) for v in rng.uniform(-math.pi, math.pi, size=(3, 3)))
        assert rotation_matrix_geodesic_error(a @ c, b @ c) == pytest.approx(
            rotation_matrix_geodesic_error(a, b), abs=1e-9
        )


def test_stride_subsample_keeps_every_kth_point() -> None:
    cloud = PointCloud(np.arange(30, dtype=float).reshape(10, 3))
    assert cloud.stride_subsample(None) is cloud
    sub = cloud.stride_subsample(4)
    assert len(sub) == 4
    np.testing.assert_array_equal(sub.points, cloud.points[::3])

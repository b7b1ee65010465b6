"""Point-cloud containers and rigid-plus-scale transforms.

Rotations use the convention R = Rz(rz) @ Ry(ry) @ Rx(rx): a point is turned about X
first, then Y, then Z. A layout maps a canonical point p to s * R @ p + t.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import numpy.typing as npt
from scipy.spatial.transform import Rotation

from src.core.errors import DegenerateCloudError, EmptyCloudError, InputError

FloatArray = npt.NDArray[np.float64]


@dataclass(frozen=True)
class PointCloud:
    points: FloatArray

    def __post_init__(self) -> None:
        pts = np.array(self.points, dtype=np.float64, copy=True)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise InputError(f"point cloud must have shape (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(pts), axis=1))[0])
            raise InputError(f"non-finite coordinate at point {bad}")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return int(self.points.shape[0])

    @property
    def is_empty(self) -> bool:
        return len(self) == 0

    def require_non_empty(self) -> PointCloud:
        if self.is_empty:
            raise EmptyCloudError()
        return self

    def centroid(self) -> FloatArray:
        self.require_non_empty()
        return np.asarray(self.points.mean(axis=0))

    def aabb(self) -> Aabb:
        self.require_non_empty()
        return Aabb(min=self.points.min(axis=0), max=self.points.max(axis=0))

    def stride_subsample(self, max_points: int | None) -> PointCloud:
        """Keep every k-th point so that at most ``max_points`` remain."""
        if max_points is None or len(self) <= max_points:
            return self
        step = math.ceil(len(self) / max_points)
        return PointCloud(self.points[::step])

    @staticmethod
    def concat(clouds: list[PointCloud]) -> PointCloud:
        if not clouds:
            return PointCloud(np.empty((0, 3)))
        return PointCloud(np.concatenate([c.points for c in clouds], axis=0))


@dataclass(frozen=True)
class Aabb:
    min: FloatArray
    max: FloatArray

    def __post_init__(self) -> None:
        if np.any(np.asarray(self.min) > np.asarray(self.max)):
            raise InputError("aabb min must not exceed max")

    @property
    def extent(self) -> FloatArray:
        return np.asarray(self.max - self.min)

    @property
    def max_extent(self) -> float:
        return float(self.extent.max())

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extent))


@dataclass(frozen=True)
class EulerRotation:
    rx: float = 0.0
    ry: float = 0.0
    rz: float = 0.0

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in (self.rx, self.ry, self.rz)):
            raise InputError("rotation angles must be finite")

    def as_array(self) -> FloatArray:
        return np.array([self.rx, self.ry, self.rz], dtype=np.float64)

    def to_rotation(self) -> Rotation:
        return Rotation.from_euler("xyz", self.as_array())

    def matrix(self) -> FloatArray:
        return np.asarray(self.to_rotation().as_matrix())


@dataclass(frozen=True)
class LayoutParams:
    t: tuple[float, float, float] = (0.0, 0.0, 0.0)
    r: EulerRotation = field(default_factory=EulerRotation)
    s: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "t", tuple(float(v) for v in self.t))
        if len(self.t) != 3 or not all(math.isfinite(v) for v in self.t):
            raise InputError("translation must be three finite values")
        if not math.isfinite(self.s) or self.s <= 0:
            raise InputError(f"scale must be positive and finite, got {self.s!r}")

    def as_vector(self) -> FloatArray:
        """Pack as (tx, ty, tz, rx, ry, rz, s)."""
        return np.array([*self.t, self.r.rx, self.r.ry, self.r.rz, self.s], dtype=np.float64)

    @classmethod
    def from_vector(cls, vec: npt.ArrayLike) -> LayoutParams:
        v = np.asarray(vec, dtype=np.float64)
        return cls(
            t=(float(v[0]), float(v[1]), float(v[2])),
            r=EulerRotation(float(v[3]), float(v[4]), float(v[5])),
            s=float(v[6]),
        )

    @classmethod
    def identity(cls) -> LayoutParams:
        return cls()


@dataclass(frozen=True)
class NormalizationRecord:
    centroid: FloatArray
    divisor: float


def axis_rotations(rx: float, ry: float, rz: float) -> tuple[FloatArray, FloatArray, FloatArray]:
    cx, sx = math.cos(rx), math.sin(rx)
    cy, sy = math.cos(ry), math.sin(ry)
    cz, sz = math.cos(rz), math.sin(rz)
    mx = np.array([[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]])
    my = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    mz = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
    return mx, my, mz


def rotation_matrix(rx: float, ry: float, rz: float) -> FloatArray:
    # extrinsic x-y-z is Rz @ Ry @ Rx
    return np.asarray(Rotation.from_euler("xyz", [rx, ry, rz]).as_matrix())


def rotation_matrix_partials(
    rx: float, ry: float, rz: float
) -> tuple[FloatArray, FloatArray, FloatArray]:
    """Derivatives of Rz @ Ry @ Rx with respect to rx, ry, rz."""
    mx, my, mz = axis_rotations(rx, ry, rz)
    cx, sx = math.cos(rx), math.sin(rx)
    cy, sy = math.cos(ry), math.sin(ry)
    cz, sz = math.cos(rz), math.sin(rz)
    dmx = np.array([[0.0, 0.0, 0.0], [0.0, -sx, -cx], [0.0, cx, -sx]])
    dmy = np.array([[-sy, 0.0, cy], [0.0, 0.0, 0.0], [-cy, 0.0, -sy]])
    dmz = np.array([[-sz, -cz, 0.0], [cz, -sz, 0.0], [0.0, 0.0, 0.0]])
    return mz @ my @ dmx, mz @ dmy @ mx, dmz @ my @ mx


def apply_transform(cloud: PointCloud, params: LayoutParams) -> PointCloud:
    if params.s <= 0:
        raise InputError("scale must be positive")
    return PointCloud(transform_points(cloud.points, params.as_vector()))


def transform_points(points: FloatArray, vec: FloatArray) -> FloatArray:
    """Raw-array form of :func:`apply_transform` on a packed parameter vector."""
    rot = rotation_matrix(float(vec[3]), float(vec[4]), float(vec[5]))
    return np.asarray(vec[6] * (points @ rot.T) + vec[:3])


def inverse_transform(cloud: PointCloud, params: LayoutParams) -> PointCloud:
    rot = params.r.matrix()
    shifted = (cloud.points - np.asarray(params.t)) * (1.0 / params.s)
    return PointCloud(shifted @ rot)


def normalize_cloud(cloud: PointCloud) -> tuple[PointCloud, NormalizationRecord]:
    """Center on the centroid and scale so the largest AABB extent becomes 1."""
    cloud.require_non_empty()
    divisor = cloud.aabb().max_extent
    if not divisor > 0:
        raise DegenerateCloudError()
    centroid = cloud.centroid()
    record = NormalizationRecord(centroid=centroid, divisor=divisor)
    return PointCloud((cloud.points - centroid) / divisor), record


def denormalize_cloud(cloud: PointCloud, record: NormalizationRecord) -> PointCloud:
    return PointCloud(cloud.points * record.divisor + record.centroid)


def rotation_geodesic_error(a: EulerRotation, b: EulerRotation) -> float:
    """Angle in radians of the relative rotation between ``a`` and ``b``."""
    return float((a.to_rotation().inv() * b.to_rotation()).magnitude())


def rotation_matrix_geodesic_error(ra: FloatArray, rb: FloatArray) -> float:
    return float((Rotation.from_matrix(ra).inv() * Rotation.from_matrix(rb)).magnitude())

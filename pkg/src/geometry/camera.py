"""Pinhole camera with a shared focal length (square pixels).

Pixel (u, v) sits at integer coordinates (column, row) with the origin at the top-left
pixel, and the ray through pixel (u, v) has direction ((u - cx) / f, (v - cy) / f, 1).
The scene frame is the camera frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import numpy.typing as npt

from src.core.errors import (
    BehindCameraError,
    DegeneratePointmapError,
    DimensionMismatchError,
    EmptyCloudError,
    InputError,
)
from src.geometry.cloud import FloatArray, PointCloud

BoolArray = npt.NDArray[np.bool_]

# Offset of the pixel center from the integer pixel coordinate; shared with the renderer.
PIXEL_CENTER_OFFSET = 0.0


@dataclass(frozen=True)
class PinholeIntrinsics:
    focal: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if not np.isfinite(self.focal) or self.focal <= 0:
            raise InputError(f"focal must be positive, got {self.focal!r}")
        if self.width <= 0 or self.height <= 0:
            raise InputError("image size must be positive")
        if not (np.isfinite(self.cx) and np.isfinite(self.cy)):
            raise InputError("principal point must be finite")

    @classmethod
    def centered(cls, focal: float, width: int, height: int) -> PinholeIntrinsics:
        return cls(focal=focal, cx=width / 2.0, cy=height / 2.0, width=width, height=height)

    def pixel_grid(self) -> tuple[FloatArray, FloatArray]:
        """(u, v) coordinates of every pixel, each shaped (height, width)."""
        v, u = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
        return u + PIXEL_CENTER_OFFSET, v + PIXEL_CENTER_OFFSET

    def ray_directions(self) -> FloatArray:
        """Per-pixel ray directions with unit z component, shaped (height, width, 3)."""
        u, v = self.pixel_grid()
        return np.stack(
            [(u - self.cx) / self.focal, (v - self.cy) / self.focal, np.ones_like(u)], axis=-1
        )


@dataclass(frozen=True)
class DepthMap:
    values: FloatArray

    def __post_init__(self) -> None:
        vals = np.array(self.values, dtype=np.float64, copy=True)
        if vals.ndim != 2:
            raise InputError("depth map must be two-dimensional")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def height(self) -> int:
        return int(self.values.shape[0])

    @property
    def width(self) -> int:
        return int(self.values.shape[1])

    @property
    def valid(self) -> BoolArray:
        with np.errstate(invalid="ignore"):
            return np.isfinite(self.values) & (self.values > 0)


@dataclass(frozen=True)
class Pointmap:
    points: FloatArray
    valid: BoolArray

    def __post_init__(self) -> None:
        pts = np.array(self.points, dtype=np.float64, copy=True)
        valid = np.array(self.valid, dtype=bool, copy=True)
        if pts.ndim != 3 or pts.shape[2] != 3 or valid.shape != pts.shape[:2]:
            raise InputError("pointmap must be (H, W, 3) with an (H, W) validity grid")
        with np.errstate(invalid="ignore"):
            valid &= np.all(np.isfinite(pts), axis=2) & (pts[..., 2] > 0)
        pts.setflags(write=False)
        valid.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "valid", valid)

    @classmethod
    def from_points(cls, points: FloatArray) -> Pointmap:
        """Validity inferred from the coordinates: finite and in front of the camera."""
        pts = np.asarray(points, dtype=np.float64)
        return cls(points=pts, valid=np.ones(pts.shape[:2], dtype=bool))

    @property
    def height(self) -> int:
        return int(self.points.shape[0])

    @property
    def width(self) -> int:
        return int(self.points.shape[1])


def project_points(points: FloatArray, cam: PinholeIntrinsics) -> FloatArray:
    """Unchecked projection; callers guarantee z > 0."""
    z = points[:, 2]
    u = cam.focal * points[:, 0] / z + cam.cx
    v = cam.focal * points[:, 1] / z + cam.cy
    return np.stack([u, v], axis=1)


def project(cloud: PointCloud, cam: PinholeIntrinsics) -> FloatArray:
    """Pixel coordinates of every point, unclipped, in input order."""
    pts = cloud.points
    behind = np.flatnonzero(pts[:, 2] <= 0)
    if behind.size:
        i = int(behind[0])
        raise BehindCameraError(i, float(pts[i, 2]))
    return project_points(pts, cam)


def _check_dims(width: int, height: int, cam: PinholeIntrinsics) -> None:
    if (width, height) != (cam.width, cam.height):
        raise DimensionMismatchError(
            f"raster is {width}x{height} but intrinsics are {cam.width}x{cam.height}"
        )


def backproject_depth(depth: DepthMap, cam: PinholeIntrinsics) -> Pointmap:
    _check_dims(depth.width, depth.height, cam)
    valid = depth.valid
    d = np.where(valid, depth.values, 0.0)
    u, v = cam.pixel_grid()
    points = np.stack([(u - cam.cx) * d / cam.focal, (v - cam.cy) * d / cam.focal, d], axis=-1)
    return Pointmap(points=points, valid=valid)


def estimate_focal(pm: Pointmap) -> PinholeIntrinsics:
    """Closed-form least-squares focal with the principal point fixed at the image center."""
    cx, cy = pm.width / 2.0, pm.height / 2.0
    v, u = np.mgrid[0 : pm.height, 0 : pm.width].astype(np.float64)
    u = u[pm.valid] + PIXEL_CENTER_OFFSET - cx
    v = v[pm.valid] + PIXEL_CENTER_OFFSET - cy
    pts = pm.points[pm.valid]
    if pts.shape[0] == 0:
        raise DegeneratePointmapError("degenerate pointmap: no valid pixels")
    a = pts[:, 0] / pts[:, 2]
    b = pts[:, 1] / pts[:, 2]
    denom = float(np.sum(a * a + b * b))
    if denom <= 1e-12:
        raise DegeneratePointmapError()
    focal = float(np.sum(u * a + v * b)) / denom
    if not focal > 0:
        raise DegeneratePointmapError(f"degenerate pointmap: estimated focal {focal!r}")
    return PinholeIntrinsics(focal=focal, cx=cx, cy=cy, width=pm.width, height=pm.height)


def pointmap_to_cloud(pm: Pointmap) -> PointCloud:
    pts = pm.points[pm.valid]
    if pts.shape[0] == 0:
        raise EmptyCloudError("pointmap has no valid pixels")
    return PointCloud(pts)

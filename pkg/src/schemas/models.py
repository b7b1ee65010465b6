import enum
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from src.geometry.camera import PinholeIntrinsics
from src.geometry.cloud import EulerRotation, LayoutParams

Vec3 = tuple[float, float, float]


class IntrinsicsModel(BaseModel):
    model_config = ConfigDict(frozen=True)

    focal: float = Field(..., gt=0, description="Focal length in pixels (square pixels)")
    cx: float = Field(..., description="Principal point x in pixels")
    cy: float = Field(..., description="Principal point y in pixels")
    width: int = Field(..., gt=0, description="Image width in pixels")
    height: int = Field(..., gt=0, description="Image height in pixels")

    def to_intrinsics(self) -> PinholeIntrinsics:
        return PinholeIntrinsics(self.focal, self.cx, self.cy, self.width, self.height)

    @classmethod
    def from_intrinsics(cls, cam: PinholeIntrinsics) -> "IntrinsicsModel":
        return cls(focal=cam.focal, cx=cam.cx, cy=cam.cy, width=cam.width, height=cam.height)


class LayoutParamsModel(BaseModel):
    model_config = ConfigDict(frozen=True)

    t: Vec3 = Field((0.0, 0.0, 0.0), description="Translation in scene units")
    r: Vec3 = Field((0.0, 0.0, 0.0), description="Euler angles (rx, ry, rz) in radians")
    s: float = Field(1.0, gt=0, description="Isotropic scale")

    def to_params(self) -> LayoutParams:
        return LayoutParams(t=self.t, r=EulerRotation(*self.r), s=self.s)

    @classmethod
    def from_params(cls, params: LayoutParams) -> "LayoutParamsModel":
        return cls(t=params.t, r=(params.r.rx, params.r.ry, params.r.rz), s=params.s)


# --- Scene ingestion ---


class DetectionRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    instance_id: str = Field(..., min_length=1, description="Unique instance identifier")
    label: str = Field(..., description="Detected category label")
    confidence: float = Field(..., ge=0.0, le=1.0, description="Detection confidence")
    bbox: tuple[float, float, float, float] = Field(
        ..., description="(x_min, y_min, x_max, y_max) in pixels"
    )
    mask_path: Path = Field(..., description="PGM (P5) instance mask")
    candidate_paths: list[Path] = Field(..., min_length=1, description="Candidate model PLYs")

    @field_validator("bbox")
    @classmethod
    def bbox_ordered(cls, v: tuple[float, float, float, float]) -> tuple[float, ...]:
        x_min, y_min, x_max, y_max = v
        if not (x_min < x_max and y_min < y_max):
            raise ValueError("bbox must satisfy x_min < x_max and y_min < y_max")
        return v


class SceneManifest(BaseModel):
    model_config = ConfigDict(frozen=True)

    depth_path: Path | None = Field(None, description="Grayscale PFM depth map")
    pointmap_path: Path | None = Field(None, description="Color PFM pointmap (x, y, z)")
    intrinsics: IntrinsicsModel | None = Field(None, description="Explicit camera intrinsics")
    confidence_threshold: float = Field(0.5, ge=0.0, le=1.0, description="Detection threshold")
    max_candidates: int = Field(5, ge=1, description="Maximum candidate models per instance")
    detections: list[DetectionRecord] = Field(default_factory=list)

    # Filled in by the loader
    source_path: Path | None = Field(None, description="Manifest file the job was loaded from")
    image_size: tuple[int, int] | None = Field(None, description="(width, height) of the scene")

    @model_validator(mode="after")
    def one_geometry_source(self) -> "SceneManifest":
        if (self.depth_path is None) == (self.pointmap_path is None):
            raise ValueError("exactly one geometry source (depth_path or pointmap_path)")
        if self.depth_path is not None and self.intrinsics is None:
            raise ValueError("depth_path requires explicit intrinsics")
        ids = [d.instance_id for d in self.detections]
        if len(ids) != len(set(ids)):
            raise ValueError("instance_id values must be unique")
        return self


# --- Optimization ---


class OptimizationMode(str, enum.Enum):
    FULL = "full"
    ONLY3D = "only3d"
    ONLY2D = "only2d"


class LossWeights(BaseModel):
    model_config = ConfigDict(frozen=True)

    lambda1: float = Field(1.0, ge=0.0, description="Weight of the 3D Chamfer term")
    lambda2: float = Field(5e-2, ge=0.0, description="Weight of the 2D projected Chamfer term")

    @model_validator(mode="after")
    def not_both_zero(self) -> "LossWeights":
        if self.lambda1 == 0 and self.lambda2 == 0:
            raise ValueError("lambda1 and lambda2 must not both be zero")
        return self


class OptimizerConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    epochs: int = Field(20, gt=0, description="Independent restarts")
    iters_per_epoch: int = Field(2000, gt=0)
    phase1_iters: int = Field(1200, gt=0, description="Leading iterations with the 3D term only")
    lr: float = Field(0.01, gt=0)
    adam_beta1: float = Field(0.9, ge=0.0, lt=1.0)
    adam_beta2: float = Field(0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(1e-8, gt=0)
    seed: int = 0
    mode: OptimizationMode = OptimizationMode.FULL
    max_points: int | None = Field(None, gt=0, description="Stride-subsample clouds above this")
    min_scale: float = Field(1e-4, gt=0)
    behind_camera_eps: float = Field(1e-6, ge=0.0)

    @model_validator(mode="after")
    def phase_split_fits(self) -> "OptimizerConfig":
        if self.phase1_iters > self.iters_per_epoch:
            raise ValueError("phase1_iters must not exceed iters_per_epoch")
        return self


# --- Outputs ---


class SelectionReport(BaseModel):
    instance_id: str
    scores: list[float] | None = Field(None, description="Normalized CD per candidate")
    chosen: int = Field(..., ge=0, description="Index of the chosen candidate")
    method: Literal["chamfer", "random"] = "chamfer"


class SelectionReportFile(BaseModel):
    tool_version: str
    manifest_path: str
    reports: list[SelectionReport]
    warnings: list[str] = Field(default_factory=list)


class InstanceLayout(BaseModel):
    instance_id: str
    label: str
    status: Literal["ok", "failed"] = "ok"
    error: str | None = None
    candidate_index: int | None = None
    candidate_path: str | None = None
    params: LayoutParamsModel | None = None
    chosen_epoch: int | None = None
    failed_epochs: int = 0
    loss3d: float | None = None
    loss2d: float | None = None
    total: float | None = None
    excluded_points: int = 0
    fscore_3d: float | None = Field(None, description="F-Score against the instance cloud @0.01")
    fscore_2d: float | None = Field(None, description="Projected F-Score @1.00 px")


class SceneLayoutFile(BaseModel):
    kind: Literal["scene_layout"] = "scene_layout"
    tool_version: str
    seed: int
    manifest_path: str
    intrinsics: IntrinsicsModel
    selection_enabled: bool
    weights: LossWeights
    config: OptimizerConfig
    instances: list[InstanceLayout]


class RecoveryTolerances(BaseModel):
    translation_pct: float = Field(2.0, gt=0, description="% of the scene AABB diagonal")
    rotation_deg: float = Field(5.0, gt=0)
    scale_rel: float = Field(0.02, gt=0)


class InstanceRecovery(BaseModel):
    instance_id: str
    shape: str
    success: bool
    reason: str | None = None
    translation_error: float | None = None
    translation_error_pct: float | None = None
    rotation_error_deg: float | None = None
    rotation_skipped: bool = False
    scale_rel_error: float | None = None
    final_cd: float | None = None


class RecoveryReport(BaseModel):
    tolerances: RecoveryTolerances
    instances: list[InstanceRecovery]
    success_rate: float


class InstanceMetrics(BaseModel):
    instance_id: str
    cd_3d: float
    cd_2d: float | None
    fscore_3d: float
    fscore_2d: float | None


class MetricsReport(BaseModel):
    instances: list[InstanceMetrics]
    mean_cd_3d: float | None
    mean_cd_2d: float | None
    mean_fscore_3d: float | None
    mean_fscore_2d: float | None
    mismatched: list[str] = Field(default_factory=list)
    recovery: RecoveryReport | None = None


# --- Synthetic bench ---


class PrimitiveShape(str, enum.Enum):
    SPHERE = "sphere"
    BOX = "box"
    L_BRACKET = "l_bracket"


class PrimitiveConfig(BaseModel):
    shape: PrimitiveShape
    canonical_size: float = Field(1.0, gt=0, description="Largest canonical extent")
    proportions: Vec3 | None = Field(None, description="Box extents relative to the largest")
    pose: LayoutParamsModel = Field(default_factory=LayoutParamsModel)
    label: str | None = None
    point_budget: int = Field(2048, ge=1)


class CameraConfig(BaseModel):
    focal: float = Field(160.0, gt=0)
    width: int = Field(192, gt=0)
    height: int = Field(144, gt=0)


class BenchConfig(BaseModel):
    camera: CameraConfig = Field(default_factory=CameraConfig)
    primitives: list[PrimitiveConfig] = Field(
        default_factory=list, description="Explicit scene; empty means a seeded random scene"
    )
    random_count: tuple[int, int] = Field((3, 3), description="Inclusive range of primitives")
    candidates_per_instance: int = Field(5, ge=1)
    depth_noise_sigma: float = Field(0.0, ge=0.0)
    emit_pointmap: bool = Field(False, description="Write a pointmap job without intrinsics")
    confidence: float = Field(0.9, ge=0.0, le=1.0)
    max_tilt_deg: float = Field(
        10.0,
        gt=0.0,
        le=180.0,
        description="Random scenes draw each Euler angle uniformly within this bound",
    )

    @field_validator("random_count")
    @classmethod
    def count_range(cls, v: tuple[int, int]) -> tuple[int, int]:
        if not 1 <= v[0] <= v[1]:
            raise ValueError("random_count must satisfy 1 <= min <= max")
        return v


class GroundTruthInstance(BaseModel):
    instance_id: str
    label: str
    primitive: PrimitiveConfig
    gt_cloud_path: str = Field(..., description="Canonical reference cloud, relative path")
    occlusion_fraction: float = Field(..., ge=0.0, le=1.0)


class GroundTruthSidecar(BaseModel):
    kind: Literal["synthetic_ground_truth"] = "synthetic_ground_truth"
    tool_version: str
    seed: int
    intrinsics: IntrinsicsModel
    depth_noise_sigma: float = 0.0
    instances: list[GroundTruthInstance]

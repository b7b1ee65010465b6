"""Ground-truth scene factory built from analytic primitives.

Primitives are rendered by casting one ray per pixel center; the resulting depth map,
masks and candidate clouds form a scene job with a known pose per instance.
"""

from __future__ import annotations

import json
import math
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import structlog

from src import __version__
from src.core.errors import InputError
from src.core.files import atomic_write_text
from src.formats.ply import save_point_cloud
from src.formats.raster import write_mask, write_pfm
from src.geometry.camera import DepthMap, PinholeIntrinsics, backproject_depth, project_points
from src.geometry.cloud import (
    Aabb,
    FloatArray,
    LayoutParams,
    PointCloud,
    apply_transform,
    rotation_matrix,
    rotation_matrix_geodesic_error,
)
from src.metrics.pointcloud import chamfer_distance
from src.schemas.models import (
    BenchConfig,
    GroundTruthInstance,
    GroundTruthSidecar,
    InstanceRecovery,
    IntrinsicsModel,
    LayoutParamsModel,
    PrimitiveConfig,
    PrimitiveShape,
    RecoveryReport,
    RecoveryTolerances,
)
from src.services.ingest_service import InstanceMask
from src.services.selection_service import CandidateSet

logger = structlog.get_logger(__name__)

MIN_DEPTH = 0.05
MAX_OCCLUSION = 0.5
DEFAULT_BOX_PROPORTIONS = (1.0, 0.7, 0.45)
DECOY_STRETCH = (1.6, 0.5)
VISIBILITY_RTOL = 1e-9
_VISIBLE_ROUNDS = 64

# L-bracket as two boxes in unit coordinates (before centering); unequal legs and depths
# leave it with no rotational symmetry.
_BRACKET_BOXES = (
    ((0.0, 0.0, 0.0), (1.0, 0.25, 0.3)),
    ((0.0, 0.0, 0.0), (0.2, 0.6, 0.45)),
)
_BRACKET_CENTER = np.array([0.5, 0.3, 0.225])

Box = tuple[FloatArray, FloatArray]


@dataclass(frozen=True)
class PrimitiveSpec:
    shape: PrimitiveShape
    canonical_size: float
    pose: LayoutParams
    label: str
    point_budget: int = 2048
    proportions: tuple[float, float, float] = DEFAULT_BOX_PROPORTIONS

    def __post_init__(self) -> None:
        if self.canonical_size <= 0:
            raise InputError("canonical_size must be positive")
        if self.point_budget < 1:
            raise InputError("point_budget must be at least 1")
        peak = max(self.proportions)
        if min(self.proportions) <= 0:
            raise InputError("proportions must be positive")
        object.__setattr__(self, "proportions", tuple(p / peak for p in self.proportions))
        if self.min_depth() <= MIN_DEPTH:
            raise InputError(
                f"primitive {self.label!r} is behind the camera (min z {self.min_depth():.4f})"
            )

    @property
    def radius(self) -> float:
        return self.canonical_size / 2.0

    def canonical_boxes(self) -> list[Box]:
        if self.shape is PrimitiveShape.BOX:
            half = 0.5 * self.canonical_size * np.asarray(self.proportions)
            return [(-half, half)]
        if self.shape is PrimitiveShape.L_BRACKET:
            return [
                (
                    (np.asarray(lo) - _BRACKET_CENTER) * self.canonical_size,
                    (np.asarray(hi) - _BRACKET_CENTER) * self.canonical_size,
                )
                for lo, hi in _BRACKET_BOXES
            ]
        return []

    def min_depth(self) -> float:
        if self.shape is PrimitiveShape.SPHERE:
            return self.pose.t[2] - self.pose.s * self.radius
        corners = np.concatenate(
            [
                np.array(np.meshgrid(*zip(lo, hi, strict=True), indexing="ij")).reshape(3, -1).T
                for lo, hi in self.canonical_boxes()
            ]
        )
        return float(apply_transform(PointCloud(corners), self.pose).points[:, 2].min())

    @classmethod
    def from_config(cls, cfg: PrimitiveConfig, index: int) -> PrimitiveSpec:
        return cls(
            shape=cfg.shape,
            canonical_size=cfg.canonical_size,
            pose=cfg.pose.to_params(),
            label=cfg.label or f"{cfg.shape.value}_{index}",
            point_budget=cfg.point_budget,
            proportions=cfg.proportions or DEFAULT_BOX_PROPORTIONS,
        )

    def to_config(self) -> PrimitiveConfig:
        return PrimitiveConfig(
            shape=self.shape,
            canonical_size=self.canonical_size,
            proportions=self.proportions,
            pose=LayoutParamsModel.from_params(self.pose),
            label=self.label,
            point_budget=self.point_budget,
        )


@dataclass(frozen=True)
class SyntheticScene:
    cam: PinholeIntrinsics
    primitives: list[PrimitiveSpec]
    instance_ids: list[str]
    depth: DepthMap
    masks: list[InstanceMask]
    canonical_clouds: list[PointCloud]
    occlusion_fraction: list[float]
    seed: int = 0
    depth_noise_sigma: float = 0.0


# --- Ray casting ---


def _ray_sphere(dirs: FloatArray, spec: PrimitiveSpec) -> FloatArray:
    center = np.asarray(spec.pose.t)
    radius = spec.pose.s * spec.radius
    a = np.einsum("ij,ij->i", dirs, dirs)
    b = dirs @ center
    disc = b * b - a * (float(center @ center) - radius * radius)
    hit = disc >= 0
    tau = np.full(dirs.shape[0], np.inf)
    tau[hit] = (b[hit] - np.sqrt(disc[hit])) / a[hit]
    tau[tau <= 0] = np.inf
    return tau


def _ray_box(dirs: FloatArray, spec: PrimitiveSpec, box: Box) -> FloatArray:
    rot = spec.pose.r.matrix()
    origin = -(rot.T @ np.asarray(spec.pose.t)) / spec.pose.s
    local_dirs = (dirs @ rot) / spec.pose.s
    lo, hi = box
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / local_dirs
        t1 = (lo - origin) * inv
        t2 = (hi - origin) * inv
    near = np.nanmax(np.fmin(t1, t2), axis=1)
    far = np.nanmin(np.fmax(t1, t2), axis=1)
    hit = (near <= far) & (near > 0)
    return np.where(hit, near, np.inf)


def primitive_depths(spec: PrimitiveSpec, dirs: FloatArray) -> FloatArray:
    """Ray parameter of the nearest hit per ray (rays have unit z, so this is depth)."""
    if spec.shape is PrimitiveShape.SPHERE:
        return _ray_sphere(dirs, spec)
    return np.min(np.stack([_ray_box(dirs, spec, box) for box in spec.canonical_boxes()]), axis=0)


def raycast_scene(
    primitives: list[PrimitiveSpec],
    cam: PinholeIntrinsics,
    instance_ids: list[str] | None = None,
    seed: int = 0,
    depth_noise_sigma: float = 0.0,
) -> SyntheticScene:
    ids = instance_ids or [f"obj_{i:02d}" for i in range(len(primitives))]
    dirs = cam.ray_directions().reshape(-1, 3)
    shape = (cam.height, cam.width)

    if primitives:
        hits = np.stack([primitive_depths(p, dirs) for p in primitives])
        owner = np.argmin(hits, axis=0)
        nearest = hits[owner, np.arange(hits.shape[1])]
    else:
        hits = np.empty((0, dirs.shape[0]))
        owner = np.zeros(dirs.shape[0], dtype=np.intp)
        nearest = np.full(dirs.shape[0], np.inf)
    valid = np.isfinite(nearest)

    masks: list[InstanceMask] = []
    occlusion: list[float] = []
    for i in range(len(primitives)):
        visible = valid & (owner == i)
        alone = int(np.count_nonzero(np.isfinite(hits[i])))
        masks.append(InstanceMask(visible.reshape(shape)))
        occlusion.append(1.0 - np.count_nonzero(visible) / alone if alone else 1.0)

    depth = np.where(valid, nearest, 0.0)
    if depth_noise_sigma > 0:
        noise = np.random.default_rng([seed, 7]).normal(0.0, depth_noise_sigma, depth.shape)
        depth = np.where(valid, depth + noise, 0.0)

    clouds = [
        sample_surface(p, p.point_budget, seed=seed * 1000 + i) for i, p in enumerate(primitives)
    ]
    return SyntheticScene(
        cam=cam,
        primitives=list(primitives),
        instance_ids=ids,
        depth=DepthMap(depth.reshape(shape)),
        masks=masks,
        canonical_clouds=clouds,
        occlusion_fraction=occlusion,
        seed=seed,
        depth_noise_sigma=depth_noise_sigma,
    )


# --- Surface sampling ---


def _allocate(n: int, weights: FloatArray) -> np.ndarray:
    """Split n into integer counts proportional to weights (largest remainder)."""
    share = n * weights / weights.sum()
    counts = np.floor(share).astype(int)
    order = np.argsort(-(share - counts), kind="stable")
    counts[order[: n - counts.sum()]] += 1
    return counts


def _box_faces(lo: FloatArray, hi: FloatArray) -> list[tuple[int, float, FloatArray, FloatArray]]:
    """(fixed axis, fixed coordinate, lower corner, upper corner) for all six faces."""
    faces = []
    for axis in range(3):
        for coord in (lo[axis], hi[axis]):
            faces.append((axis, float(coord), lo, hi))
    return faces


def _sample_faces(
    lo: FloatArray, hi: FloatArray, n: int, rng: np.random.Generator
) -> FloatArray:
    faces = _box_faces(lo, hi)
    extent = hi - lo
    areas = np.array([np.prod(np.delete(extent, axis)) for axis, *_ in faces])
    counts = _allocate(n, areas)
    chunks = []
    for (axis, coord, f_lo, f_hi), count in zip(faces, counts, strict=True):
        pts = f_lo + rng.random((count, 3)) * (f_hi - f_lo)
        pts[:, axis] = coord
        chunks.append(pts)
    return np.concatenate(chunks)


def _inside(points: FloatArray, box: Box, closed: bool) -> np.ndarray:
    lo, hi = box
    if closed:
        return np.all((points >= lo) & (points <= hi), axis=1)
    return np.all((points > lo) & (points < hi), axis=1)


def _sample_bracket(spec: PrimitiveSpec, n: int, rng: np.random.Generator) -> FloatArray:
    box_a, box_b = spec.canonical_boxes()
    extents = [hi - lo for lo, hi in (box_a, box_b)]
    area = [2 * (e[0] * e[1] + e[1] * e[2] + e[0] * e[2]) for e in extents]
    pool: list[FloatArray] = []
    kept = 0
    while kept < n:
        per_box = _allocate(2 * n, np.asarray(area))
        a = _sample_faces(*box_a, int(per_box[0]), rng)
        b = _sample_faces(*box_b, int(per_box[1]), rng)
        # Coplanar overlaps are owned by the second box so they are not sampled twice.
        a = a[~_inside(a, box_b, closed=True)]
        b = b[~_inside(b, box_a, closed=False)]
        pool.extend([a, b])
        kept += a.shape[0] + b.shape[0]
    points = np.concatenate(pool)
    return points[rng.permutation(points.shape[0])[:n]]


def _sample_canonical(spec: PrimitiveSpec, n: int, rng: np.random.Generator) -> FloatArray:
    if spec.shape is PrimitiveShape.SPHERE:
        directions = rng.normal(size=(n, 3))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        return np.asarray(directions * spec.radius)
    if spec.shape is PrimitiveShape.BOX:
        return _sample_faces(*spec.canonical_boxes()[0], n, rng)
    return _sample_bracket(spec, n, rng)


def sample_surface(
    spec: PrimitiveSpec, n: int, seed: int, posed: bool = False
) -> PointCloud:
    """n points uniform by area on the canonical surface, optionally moved by the pose."""
    if n < 1:
        raise InputError("n must be at least 1")
    cloud = PointCloud(_sample_canonical(spec, n, np.random.default_rng(seed)))
    return apply_transform(cloud, spec.pose) if posed else cloud


def visible_from_camera(
    spec: PrimitiveSpec, canonical: FloatArray, cam: PinholeIntrinsics
) -> np.ndarray:
    """Mask of canonical surface points that are the first hit of their camera ray and in frame."""
    posed = apply_transform(PointCloud(canonical), spec.pose).points
    z = posed[:, 2]
    hit = primitive_depths(spec, posed / z[:, None])
    px = project_points(posed, cam)
    in_frame = (
        (px[:, 0] >= 0) & (px[:, 0] < cam.width) & (px[:, 1] >= 0) & (px[:, 1] < cam.height)
    )
    return np.asarray(np.isfinite(hit) & (hit >= z * (1.0 - VISIBILITY_RTOL)) & in_frame)


def sample_visible_surface(
    spec: PrimitiveSpec, n: int, seed: int, cam: PinholeIntrinsics
) -> PointCloud:
    """n canonical-frame points, uniform by area over the part of the surface the camera sees.

    The primitive's own back faces are dropped; other objects do not occlude it. This is
    what a generator that rebuilds an object from its image crop can reproduce.
    """
    if n < 1:
        raise InputError("n must be at least 1")
    rng = np.random.default_rng([seed, 5])
    pool: list[FloatArray] = []
    kept = 0
    for _ in range(_VISIBLE_ROUNDS):
        canonical = _sample_canonical(spec, 4 * n, rng)
        seen = canonical[visible_from_camera(spec, canonical, cam)]
        pool.append(seen)
        kept += seen.shape[0]
        if kept >= n:
            break
    if kept < n:
        raise InputError(f"{spec.label}: too little of the surface is visible to sample")
    points = np.concatenate(pool)
    return PointCloud(points[rng.permutation(points.shape[0])[:n]])


# --- Candidates ---


def _family_variant(spec: PrimitiveSpec, shape: PrimitiveShape) -> PrimitiveSpec:
    return PrimitiveSpec(
        shape=shape,
        canonical_size=spec.canonical_size,
        pose=spec.pose,
        label=f"{spec.label}_{shape.value}",
        point_budget=spec.point_budget,
    )


def make_candidates(
    spec: PrimitiveSpec, k: int, seed: int, cam: PinholeIntrinsics | None = None
) -> CandidateSet:
    """Candidate 0 is the correct shape; the rest are other families or stretched resamples.

    With ``cam`` every candidate covers only the surface seen from that camera at the
    primitive's pose, matching the partial cloud a depth map yields.
    """
    if k < 1:
        raise InputError("k must be at least 1")

    def sample(target: PrimitiveSpec, sub_seed: int) -> PointCloud:
        if cam is None:
            return sample_surface(target, spec.point_budget, seed=sub_seed)
        return sample_visible_surface(target, spec.point_budget, sub_seed, cam)

    rng = np.random.default_rng([seed, 11])
    others = [s for s in PrimitiveShape if s is not spec.shape]
    clouds = [sample(spec, seed)]
    for j in range(1, k):
        slot = (j - 1) % 4
        if slot < 2:
            clouds.append(sample(_family_variant(spec, others[slot]), seed + 101 * j))
        else:
            stretch = np.ones(3)
            # x or y: a depth-only stretch leaves the view of a flat face unchanged
            stretch[int(rng.integers(2))] = DECOY_STRETCH[slot - 2]
            clouds.append(PointCloud(sample(spec, seed + 101 * j).points * stretch))
    return CandidateSet.from_clouds(spec.label, clouds, max_candidates=max(k, 1))


# --- Recovery evaluation ---


_BOX_SYMMETRIES = [rotation_matrix(0.0, 0.0, 0.0)] + [
    rotation_matrix(*(math.pi if i == axis else 0.0 for i in range(3))) for axis in range(3)
]


def scene_diagonal(scene: SyntheticScene) -> float:
    posed = [
        apply_transform(cloud, p.pose)
        for cloud, p in zip(scene.canonical_clouds, scene.primitives, strict=True)
    ]
    bounds: Aabb = PointCloud.concat(posed).aabb()
    return bounds.diagonal


def evaluate_recovery(
    scene: SyntheticScene,
    recovered: Mapping[str, LayoutParams],
    tolerances: RecoveryTolerances | None = None,
) -> RecoveryReport:
    tol = tolerances or RecoveryTolerances()
    diagonal = scene_diagonal(scene) if scene.primitives else 1.0
    rows: list[InstanceRecovery] = []
    for idx, spec in enumerate(scene.primitives):
        instance_id = scene.instance_ids[idx]
        if scene.occlusion_fraction[idx] >= 1.0:
            continue
        params = recovered.get(instance_id)
        if params is None:
            rows.append(
                InstanceRecovery(
                    instance_id=instance_id, shape=spec.shape.value, success=False, reason="missing"
                )
            )
            continue

        gt = spec.pose
        t_err = float(np.linalg.norm(np.asarray(params.t) - np.asarray(gt.t)))
        t_pct = 100.0 * t_err / diagonal
        s_err = abs(params.s - gt.s) / gt.s

        rot_deg: float | None = None
        if spec.shape is not PrimitiveShape.SPHERE:
            symmetries = (
                _BOX_SYMMETRIES if spec.shape is PrimitiveShape.BOX else _BOX_SYMMETRIES[:1]
            )
            gt_rot, rec_rot = gt.r.matrix(), params.r.matrix()
            rot_deg = math.degrees(
                min(rotation_matrix_geodesic_error(gt_rot @ g, rec_rot) for g in symmetries)
            )

        cloud = scene.canonical_clouds[idx]
        final_cd = chamfer_distance(apply_transform(cloud, params), apply_transform(cloud, gt))
        reasons = []
        if t_pct > tol.translation_pct:
            reasons.append("translation")
        if rot_deg is not None and rot_deg > tol.rotation_deg:
            reasons.append("rotation")
        if s_err > tol.scale_rel:
            reasons.append("scale")
        rows.append(
            InstanceRecovery(
                instance_id=instance_id,
                shape=spec.shape.value,
                success=not reasons,
                reason=", ".join(reasons) or None,
                translation_error=t_err,
                translation_error_pct=t_pct,
                rotation_error_deg=rot_deg,
                rotation_skipped=rot_deg is None,
                scale_rel_error=s_err,
                final_cd=final_cd,
            )
        )

    rate = sum(r.success for r in rows) / len(rows) if rows else 0.0
    return RecoveryReport(tolerances=tol, instances=rows, success_rate=rate)


# --- Scene generation and job export ---


@dataclass
class SyntheticJob:
    root: Path
    manifest_path: Path
    sidecar_path: Path
    files: list[Path] = field(default_factory=list)


class SyntheticService:
    def __init__(self, config: BenchConfig, seed: int = 0):
        self.config = config
        self.seed = seed

    def camera(self) -> PinholeIntrinsics:
        cam = self.config.camera
        return PinholeIntrinsics.centered(cam.focal, cam.width, cam.height)

    def _random_primitives(
        self, rng: np.random.Generator, cam: PinholeIntrinsics
    ) -> list[PrimitiveSpec]:
        low, high = self.config.random_count
        count = int(rng.integers(low, high + 1))
        tilt = math.radians(self.config.max_tilt_deg)
        specs = []
        for i in range(count):
            shape = list(PrimitiveShape)[int(rng.integers(3))]
            z = float(rng.uniform(3.0, 5.0))
            u = float(rng.uniform(0.25, 0.75)) * cam.width
            v = float(rng.uniform(0.25, 0.75)) * cam.height
            t = ((u - cam.cx) * z / cam.focal, (v - cam.cy) * z / cam.focal, z)
            angles = rng.uniform(-tilt, tilt, size=3)
            pose = LayoutParams.from_vector([*t, *angles, float(rng.uniform(0.8, 1.2))])
            specs.append(
                PrimitiveSpec(
                    shape=shape,
                    canonical_size=float(rng.uniform(0.6, 1.0)),
                    pose=pose,
                    label=f"{shape.value}_{i}",
                )
            )
        return specs

    def build_scene(self, max_attempts: int = 50) -> SyntheticScene:
        cam = self.camera()
        cfg = self.config
        if cfg.primitives:
            specs = [PrimitiveSpec.from_config(p, i) for i, p in enumerate(cfg.primitives)]
            return raycast_scene(
                specs, cam, seed=self.seed, depth_noise_sigma=cfg.depth_noise_sigma
            )

        rng = np.random.default_rng(self.seed)
        scene: SyntheticScene | None = None
        for attempt in range(max_attempts):
            specs = self._random_primitives(rng, cam)
            scene = raycast_scene(
                specs, cam, seed=self.seed, depth_noise_sigma=cfg.depth_noise_sigma
            )
            if max(scene.occlusion_fraction) <= MAX_OCCLUSION:
                logger.debug("scene_accepted", attempt=attempt, count=len(specs))
                return scene
        logger.warning("occlusion_limit_not_met", attempts=max_attempts)
        assert scene is not None
        return scene

    def write_job(self, out_dir: Path, scene: SyntheticScene | None = None) -> SyntheticJob:
        """Emit manifest, raster, masks, candidate PLYs and the ground-truth sidecar."""
        scene = scene or self.build_scene()
        cfg = self.config
        out_dir = Path(out_dir)
        job = SyntheticJob(
            root=out_dir,
            manifest_path=out_dir / "manifest.json",
            sidecar_path=out_dir / "ground_truth.json",
        )

        manifest: dict[str, object] = {
            "confidence_threshold": 0.5,
            "max_candidates": cfg.candidates_per_instance,
        }
        if cfg.emit_pointmap:
            pm = backproject_depth(scene.depth, scene.cam)
            points = np.where(pm.valid[..., None], pm.points, 0.0)
            write_pfm(out_dir / "pointmap.pfm", points)
            manifest["pointmap_path"] = "pointmap.pfm"
            job.files.append(out_dir / "pointmap.pfm")
        else:
            write_pfm(out_dir / "depth.pfm", scene.depth.values)
            manifest["depth_path"] = "depth.pfm"
            manifest["intrinsics"] = IntrinsicsModel.from_intrinsics(scene.cam).model_dump()
            job.files.append(out_dir / "depth.pfm")

        detections = []
        truths = []
        for idx, spec in enumerate(scene.primitives):
            instance_id = scene.instance_ids[idx]
            candidates = make_candidates(
                spec, cfg.candidates_per_instance, seed=self.seed * 1000 + idx, cam=scene.cam
            )
            cand_paths = []
            for k, cloud in candidates.candidates:
                rel = f"candidates/{instance_id}_{k}.ply"
                save_point_cloud(cloud, out_dir / rel)
                cand_paths.append(rel)
                job.files.append(out_dir / rel)

            truths.append(
                GroundTruthInstance(
                    instance_id=instance_id,
                    label=spec.label,
                    primitive=spec.to_config(),
                    gt_cloud_path=cand_paths[0],
                    occlusion_fraction=scene.occlusion_fraction[idx],
                )
            )
            bits = scene.masks[idx].bits
            if not bits.any():
                logger.warning("instance_fully_occluded", instance_id=instance_id)
                continue
            mask_rel = f"masks/{instance_id}.pgm"
            write_mask(out_dir / mask_rel, bits)
            job.files.append(out_dir / mask_rel)
            rows, cols = np.nonzero(bits)
            detections.append(
                {
                    "instance_id": instance_id,
                    "label": spec.label,
                    "confidence": cfg.confidence,
                    "bbox": [
                        int(cols.min()),
                        int(rows.min()),
                        int(cols.max()) + 1,
                        int(rows.max()) + 1,
                    ],
                    "mask_path": mask_rel,
                    "candidate_paths": cand_paths,
                }
            )
        manifest["detections"] = detections

        atomic_write_text(job.manifest_path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        sidecar = GroundTruthSidecar(
            tool_version=__version__,
            seed=self.seed,
            intrinsics=IntrinsicsModel.from_intrinsics(scene.cam),
            depth_noise_sigma=scene.depth_noise_sigma,
            instances=truths,
        )
        atomic_write_text(
            job.sidecar_path,
            json.dumps(sidecar.model_dump(mode="json"), indent=2, sort_keys=True) + "\n",
        )
        logger.info("synthetic_job_written", root=str(out_dir), instances=len(detections))
        return job


def scene_from_sidecar(sidecar: GroundTruthSidecar, seed: int | None = None) -> SyntheticScene:
    """Re-render the ground-truth scene described by a sidecar."""
    specs = [PrimitiveSpec.from_config(t.primitive, i) for i, t in enumerate(sidecar.instances)]
    return raycast_scene(
        specs,
        sidecar.intrinsics.to_intrinsics(),
        instance_ids=[t.instance_id for t in sidecar.instances],
        seed=sidecar.seed if seed is None else seed,
        depth_noise_sigma=sidecar.depth_noise_sigma,
    )

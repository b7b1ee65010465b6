import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import structlog
from pydantic import ValidationError

from src.core.errors import (
    DimensionMismatchError,
    EmptyInstanceError,
    FormatError,
    ManifestError,
)
from src.formats.ply import load_point_cloud
from src.formats.raster import read_mask, read_pfm, read_pfm_header, read_pgm_size
from src.geometry.camera import (
    BoolArray,
    DepthMap,
    PinholeIntrinsics,
    Pointmap,
    backproject_depth,
    estimate_focal,
)
from src.geometry.cloud import PointCloud
from src.schemas.models import DetectionRecord, SceneManifest

logger = structlog.get_logger(__name__)


@dataclass(frozen=True)
class InstanceMask:
    bits: BoolArray

    @property
    def height(self) -> int:
        return int(self.bits.shape[0])

    @property
    def width(self) -> int:
        return int(self.bits.shape[1])


@dataclass(frozen=True)
class SceneGeometry:
    pointmap: Pointmap
    cam: PinholeIntrinsics
    focal_estimated: bool


def _field_name(loc: tuple[Any, ...]) -> str:
    name = ""
    for part in loc:
        name += f"[{part}]" if isinstance(part, int) else (f".{part}" if name else str(part))
    return name or "<root>"


def filter_detections(manifest: SceneManifest) -> list[DetectionRecord]:
    """Keep detections with confidence strictly above the threshold, in input order."""
    return [d for d in manifest.detections if d.confidence > manifest.confidence_threshold]


def extract_instance_cloud(pm: Pointmap, mask: InstanceMask) -> PointCloud:
    if (mask.width, mask.height) != (pm.width, pm.height):
        raise DimensionMismatchError(
            f"mask is {mask.width}x{mask.height} but pointmap is {pm.width}x{pm.height}"
        )
    selected = mask.bits & pm.valid
    if not selected.any():
        raise EmptyInstanceError()
    return PointCloud(pm.points[selected])


class IngestService:
    def load_manifest(self, path: Path) -> SceneManifest:
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except OSError as e:
            raise ManifestError(path, "<file>", f"cannot read manifest: {e.strerror}") from e
        except json.JSONDecodeError as e:
            raise ManifestError(path, "<root>", f"invalid JSON: {e}") from e

        try:
            manifest = SceneManifest.model_validate(data)
        except ValidationError as e:
            err = e.errors()[0]
            raise ManifestError(path, _field_name(tuple(err["loc"])), err["msg"]) from e

        root = path.parent
        resolved = manifest.model_copy(
            update={
                "depth_path": root / manifest.depth_path if manifest.depth_path else None,
                "pointmap_path": root / manifest.pointmap_path if manifest.pointmap_path else None,
                "detections": [
                    d.model_copy(
                        update={
                            "mask_path": root / d.mask_path,
                            "candidate_paths": [root / c for c in d.candidate_paths],
                        }
                    )
                    for d in manifest.detections
                ],
                "source_path": path,
            }
        )
        width, height = self._check_geometry(path, resolved)
        self._check_detections(path, resolved, width, height)
        return resolved.model_copy(update={"image_size": (width, height)})

    def _check_geometry(self, path: Path, manifest: SceneManifest) -> tuple[int, int]:
        field, source, channels = (
            ("depth_path", manifest.depth_path, 1)
            if manifest.depth_path is not None
            else ("pointmap_path", manifest.pointmap_path, 3)
        )
        assert source is not None
        if not source.is_file():
            raise ManifestError(path, field, f"file not found: {source}")
        try:
            width, height, found = read_pfm_header(source)
        except FormatError as e:
            raise ManifestError(path, field, str(e)) from e
        if found != channels:
            raise ManifestError(path, field, f"expected a {channels}-channel PFM, got {found}")
        cam = manifest.intrinsics
        if cam is not None and (cam.width, cam.height) != (width, height):
            raise ManifestError(
                path,
                "intrinsics",
                f"dimension mismatch: intrinsics {cam.width}x{cam.height}, raster {width}x{height}",
            )
        return width, height

    def _check_detections(
        self, path: Path, manifest: SceneManifest, width: int, height: int
    ) -> None:
        for i, det in enumerate(manifest.detections):
            prefix = f"detections[{i}]"
            x_min, y_min, x_max, y_max = det.bbox
            if x_min < 0 or y_min < 0 or x_max > width or y_max > height:
                raise ManifestError(
                    path, f"{prefix}.bbox", f"bbox {det.bbox} outside {width}x{height} image"
                )
            if not det.mask_path.is_file():
                raise ManifestError(path, f"{prefix}.mask_path", f"file not found: {det.mask_path}")
            try:
                mask_size = read_pgm_size(det.mask_path)
            except FormatError as e:
                raise ManifestError(path, f"{prefix}.mask_path", str(e)) from e
            if mask_size != (width, height):
                raise ManifestError(
                    path,
                    f"{prefix}.mask_path",
                    f"dimension mismatch: mask {mask_size[0]}x{mask_size[1]}, "
                    f"scene {width}x{height}",
                )
            if len(det.candidate_paths) > manifest.max_candidates:
                raise ManifestError(
                    path,
                    f"{prefix}.candidate_paths",
                    f"{len(det.candidate_paths)} candidates exceed max_candidates="
                    f"{manifest.max_candidates}",
                )
            for k, cand in enumerate(det.candidate_paths):
                if not cand.is_file():
                    raise ManifestError(
                        path, f"{prefix}.candidate_paths[{k}]", f"file not found: {cand}"
                    )

    def load_geometry(self, manifest: SceneManifest) -> SceneGeometry:
        """Pointmap plus intrinsics; the focal is estimated when intrinsics are absent."""
        if manifest.depth_path is not None:
            assert manifest.intrinsics is not None
            cam = manifest.intrinsics.to_intrinsics()
            depth = DepthMap(read_pfm(manifest.depth_path))
            return SceneGeometry(backproject_depth(depth, cam), cam, focal_estimated=False)

        assert manifest.pointmap_path is not None
        pm = Pointmap.from_points(read_pfm(manifest.pointmap_path))
        if manifest.intrinsics is not None:
            return SceneGeometry(pm, manifest.intrinsics.to_intrinsics(), focal_estimated=False)
        cam = estimate_focal(pm)
        logger.info("focal_estimated", focal=cam.focal, width=cam.width, height=cam.height)
        return SceneGeometry(pm, cam, focal_estimated=True)

    def load_mask(self, record: DetectionRecord) -> InstanceMask:
        return InstanceMask(read_mask(record.mask_path))

    def load_candidates(self, record: DetectionRecord) -> list[PointCloud]:
        clouds = []
        for cand in record.candidate_paths:
            cloud = load_point_cloud(cand)
            if cloud.is_empty:
                raise FormatError(cand, "candidate cloud has no vertices")
            clouds.append(cloud)
        return clouds

    def load_instance_cloud(self, geometry: SceneGeometry, record: DetectionRecord) -> PointCloud:
        return extract_instance_cloud(geometry.pointmap, self.load_mask(record))


import json
from pathlib import Path

import numpy as np
import pytest

from src.core.errors import DimensionMismatchError, EmptyInstanceError, ManifestError
from src.geometry.camera import Pointmap, pointmap_to_cloud
from src.schemas.models import BenchConfig, DetectionRecord, SceneManifest
from src.services.ingest_service import (
    IngestService,
    InstanceMask,
    extract_instance_cloud,
    filter_detections,
)
from src.services.synthetic_service import SyntheticJob, SyntheticService


def detection(instance_id: str, confidence: float) -> DetectionRecord:
    return DetectionRecord(
        instance_id=instance_id,
        label="chair",
        confidence=confidence,
        bbox=(0, 0, 2, 2),
        mask_path=Path("m.pgm"),
        candidate_paths=[Path("c.ply")],
    )


def manifest_with(threshold: float, confidences: list[float]) -> SceneManifest:
    return SceneManifest(
        pointmap_path=Path("pm.pfm"),
        confidence_threshold=threshold,
        detections=[detection(f"obj_{i}", c) for i, c in enumerate(confidences)],
    )


def rewrite(path: Path, **changes: object) -> None:
    data = json.loads(path.read_text())
    data.update(changes)
    path.write_text(json.dumps(data))


def test_filter_detections_is_strict() -> None:
    kept = filter_detections(manifest_with(0.5, [0.9, 0.5, 0.4]))
    assert [d.confidence for d in kept] == [0.9]
    assert len(filter_detections(manifest_with(0.0, [0.0, 0.1, 1.0]))) == 2
    assert filter_detections(manifest_with(1.0, [1.0, 0.99])) == []


def test_extract_instance_cloud_examples() -> None:
    points = np.arange(1, 13, dtype=float).reshape(2, 2, 3)
    pm = Pointmap.from_points(points)
    everything = extract_instance_cloud(pm, InstanceMask(np.ones((2, 2), dtype=bool)))
    np.testing.assert_array_equal(everything.points, pointmap_to_cloud(pm).points)

    two = extract_instance_cloud(pm, InstanceMask(np.array([[True, False], [False, True]])))
    np.testing.assert_array_equal(two.points, [points[0, 0], points[1, 1]])


def test_extract_skips_invalid_pixels() -> None:
    points = np.ones((2, 4, 3))
    points[0, :3, 2] = 0.0
    cloud = extract_instance_cloud(
        Pointmap.from_points(points), InstanceMask(np.ones((2, 4), dtype=bool))
    )
    assert len(cloud) == 5


def test_extract_errors() -> None:
    pm = Pointmap.from_points(np.ones((2, 2, 3)))
    with pytest.raises(EmptyInstanceError, match="empty instance"):
        extract_instance_cloud(pm, InstanceMask(np.zeros((2, 2), dtype=bool)))
    with pytest.raises(DimensionMismatchError):
        extract_instance_cloud(pm, InstanceMask(np.ones((3, 2), dtype=bool)))


def test_load_synthetic_manifest(synthetic_job: SyntheticJob) -> None:
    ingest = IngestService()
    manifest = ingest.load_manifest(synthetic_job.manifest_path)
    assert len(manifest.detections) == 3
    assert manifest.image_size == (96, 72)
    assert all(p.is_file() for d in manifest.detections for p in d.candidate_paths)

    geometry = ingest.load_geometry(manifest)
    assert not geometry.focal_estimated
    for det in manifest.detections:
        cloud = ingest.load_instance_cloud(geometry, det)
        assert np.all(cloud.points[:, 2] > 0)
        assert len(ingest.load_candidates(det)) == 3


def test_manifest_with_both_sources(synthetic_job: SyntheticJob) -> None:
    rewrite(synthetic_job.manifest_path, pointmap_path="depth.pfm")
    with pytest.raises(ManifestError, match="exactly one geometry source"):
        IngestService().load_manifest(synthetic_job.manifest_path)


def test_manifest_missing_mask_names_path(synthetic_job: SyntheticJob) -> None:
    mask = synthetic_job.root / "masks" / "obj_01.pgm"
    mask.unlink()
    with pytest.raises(ManifestError) as excinfo:
        IngestService().load_manifest(synthetic_job.manifest_path)
    assert excinfo.value.field == "detections[1].mask_path"
    assert str(mask) in str(excinfo.value)


def test_manifest_depth_requires_intrinsics(synthetic_job: SyntheticJob) -> None:
    data = json.loads(synthetic_job.manifest_path.read_text())
    del data["intrinsics"]
    synthetic_job.manifest_path.write_text(json.dumps(data))
    with pytest.raises(ManifestError, match="intrinsics"):
        IngestService().load_manifest(synthetic_job.manifest_path)


def test_manifest_rejects_too_many_candidates(synthetic_job: SyntheticJob) -> None:
    rewrite(synthetic_job.manifest_path, max_candidates=2)
    with pytest.raises(ManifestError, match="max_candidates"):
        IngestService().load_manifest(synthetic_job.manifest_path)


def test_manifest_invalid_json(tmp_path: Path) -> None:
    path = tmp_path / "manifest.json"
    path.write_text("{ not json")
    with pytest.raises(ManifestError, match="invalid JSON"):
        IngestService().load_manifest(path)


def test_pointmap_job_estimates_focal(tmp_path: Path, small_bench: BenchConfig) -> None:
    config = small_bench.model_copy(update={"emit_pointmap": True})
    job = SyntheticService(config, seed=3).write_job(tmp_path / "pm_job")
    ingest = IngestService()
    manifest = ingest.load_manifest(job.manifest_path)
    assert manifest.intrinsics is None

    geometry = ingest.load_geometry(manifest)
    assert geometry.focal_estimated
    assert geometry.cam.focal == pytest.approx(80.0, rel=1e-4)

from dataclasses import dataclass
from io import BytesIO
from pathlib import Path
from typing import Literal

import numpy as np
import pandas as pd
import structlog

from src.core.errors import FormatError, InputError
from src.core.files import atomic_write_bytes
from src.formats.documents import dumps_model, parse_model, read_document
from src.formats.ply import load_point_cloud
from src.geometry.camera import PinholeIntrinsics, project_points
from src.geometry.cloud import FloatArray, LayoutParams, PointCloud, apply_transform
from src.metrics.pointcloud import chamfer_arrays, chamfer_distance, f_score, f_score_arrays
from src.schemas.models import (
    GroundTruthSidecar,
    InstanceMetrics,
    MetricsReport,
    RecoveryReport,
    RecoveryTolerances,
    SceneLayoutFile,
)
from src.services.synthetic_service import evaluate_recovery, scene_from_sidecar

logger = structlog.get_logger(__name__)

THRESHOLD_3D = 0.01
THRESHOLD_2D = 1.0
FRONT_EPS = 1e-6

ReportFormat = Literal["text", "json", "csv", "xlsx"]


@dataclass(frozen=True)
class PosedInstance:
    instance_id: str
    cloud: PointCloud
    params: LayoutParams


def projected_front(cloud: PointCloud, cam: PinholeIntrinsics) -> FloatArray:
    """Pixel coordinates of the points in front of the camera."""
    front = cloud.points[cloud.points[:, 2] > FRONT_EPS]
    return project_points(front, cam)


def instance_metrics(
    instance_id: str, pred: PointCloud, gt: PointCloud, cam: PinholeIntrinsics
) -> InstanceMetrics:
    pred_2d = projected_front(pred, cam)
    gt_2d = projected_front(gt, cam)
    has_2d = len(pred_2d) > 0 and len(gt_2d) > 0
    return InstanceMetrics(
        instance_id=instance_id,
        cd_3d=chamfer_distance(pred, gt),
        cd_2d=chamfer_arrays(pred_2d, gt_2d) if has_2d else None,
        fscore_3d=f_score(pred, gt, THRESHOLD_3D),
        fscore_2d=f_score_arrays(pred_2d, gt_2d, THRESHOLD_2D) if has_2d else None,
    )


def _mean(values: list[float | None]) -> float | None:
    present = [v for v in values if v is not None]
    return float(np.mean(present)) if present else None


def summarize(
    instances: list[InstanceMetrics],
    mismatched: list[str] | None = None,
    recovery: RecoveryReport | None = None,
) -> MetricsReport:
    return MetricsReport(
        instances=instances,
        mean_cd_3d=_mean([m.cd_3d for m in instances]),
        mean_cd_2d=_mean([m.cd_2d for m in instances]),
        mean_fscore_3d=_mean([m.fscore_3d for m in instances]),
        mean_fscore_2d=_mean([m.fscore_2d for m in instances]),
        mismatched=mismatched or [],
        recovery=recovery,
    )


class EvaluationService:
    def __init__(self, tolerances: RecoveryTolerances | None = None):
        self.tolerances = tolerances or RecoveryTolerances()

    def _layout_instances(self, path: Path, layout: SceneLayoutFile) -> dict[str, PosedInstance]:
        posed: dict[str, PosedInstance] = {}
        for inst in layout.instances:
            if inst.status != "ok" or inst.params is None or inst.candidate_path is None:
                logger.warning("instance_not_evaluated", instance_id=inst.instance_id)
                continue
            params = inst.params.to_params()
            model = load_point_cloud(path.parent / inst.candidate_path)
            posed[inst.instance_id] = PosedInstance(
                inst.instance_id, apply_transform(model, params), params
            )
        return posed

    def _sidecar_instances(
        self, path: Path, sidecar: GroundTruthSidecar
    ) -> dict[str, PosedInstance]:
        posed: dict[str, PosedInstance] = {}
        for inst in sidecar.instances:
            if inst.occlusion_fraction >= 1.0:
                continue
            params = inst.primitive.pose.to_params()
            model = load_point_cloud(path.parent / inst.gt_cloud_path)
            posed[inst.instance_id] = PosedInstance(
                inst.instance_id, apply_transform(model, params), params
            )
        return posed

    def evaluate_files(self, layout_path: Path, ground_truth_path: Path) -> MetricsReport:
        """Compare a layout against either a bench sidecar or another layout file."""
        layout_path, ground_truth_path = Path(layout_path), Path(ground_truth_path)
        _, layout_body = read_document(layout_path)
        if layout_body.get("kind") != "scene_layout":
            raise FormatError(layout_path, "not a scene layout file")
        layout = parse_model(layout_path, layout_body, SceneLayoutFile)
        predicted = self._layout_instances(layout_path, layout)
        expected_ids = {inst.instance_id for inst in layout.instances}

        _, gt_body = read_document(ground_truth_path)
        sidecar: GroundTruthSidecar | None = None
        if gt_body.get("kind") == "synthetic_ground_truth":
            sidecar = parse_model(ground_truth_path, gt_body, GroundTruthSidecar)
            truth = self._sidecar_instances(ground_truth_path, sidecar)
            cam = sidecar.intrinsics.to_intrinsics()
            truth_ids = set(truth)
        elif gt_body.get("kind") == "scene_layout":
            gt_layout = parse_model(ground_truth_path, gt_body, SceneLayoutFile)
            truth = self._layout_instances(ground_truth_path, gt_layout)
            cam = gt_layout.intrinsics.to_intrinsics()
            truth_ids = {inst.instance_id for inst in gt_layout.instances}
        else:
            raise FormatError(ground_truth_path, "expected a ground-truth sidecar or layout file")

        mismatched = sorted(expected_ids ^ truth_ids)
        if mismatched:
            logger.warning("instance_sets_differ", mismatched=mismatched)

        metrics = [
            instance_metrics(key, predicted[key].cloud, truth[key].cloud, cam)
            for key in sorted(set(predicted) & set(truth))
        ]
        recovery = None
        if sidecar is not None:
            recovered = {k: v.params for k, v in predicted.items()}
            recovery = evaluate_recovery(scene_from_sidecar(sidecar), recovered, self.tolerances)
        return summarize(metrics, mismatched, recovery)


# --- Report rendering ---


def report_to_frame(report: MetricsReport) -> pd.DataFrame:
    frame = pd.DataFrame(
        [m.model_dump() for m in report.instances],
        columns=["instance_id", "cd_3d", "cd_2d", "fscore_3d", "fscore_2d"],
    )
    if report.recovery is not None and report.recovery.instances:
        recovery = pd.DataFrame([r.model_dump() for r in report.recovery.instances])
        frame = frame.merge(recovery, on="instance_id", how="outer")
    return frame


def _summary_frame(report: MetricsReport) -> pd.DataFrame:
    summary: dict[str, list[object]] = {
        "Instances": [len(report.instances)],
        "Mean CD 3D": [report.mean_cd_3d],
        "Mean CD 2D": [report.mean_cd_2d],
        "Mean F-Score 3D @0.01": [report.mean_fscore_3d],
        "Mean F-Score 2D @1.00": [report.mean_fscore_2d],
        "Mismatched": [", ".join(report.mismatched)],
    }
    if report.recovery is not None:
        summary["Recovery Success Rate"] = [report.recovery.success_rate]
    return pd.DataFrame(summary)


def format_text(report: MetricsReport) -> str:
    def fmt(value: float | None) -> str:
        return "n/a" if value is None else f"{value:.6g}"

    lines = []
    for m in report.instances:
        lines += [
            f"instance {m.instance_id}",
            f"  cd_3d          {fmt(m.cd_3d)}",
            f"  cd_2d          {fmt(m.cd_2d)}",
            f"  fscore_3d@0.01 {fmt(m.fscore_3d)}",
            f"  fscore_2d@1.00 {fmt(m.fscore_2d)}",
        ]
    lines += [
        "scene",
        f"  mean_cd_3d     {fmt(report.mean_cd_3d)}",
        f"  mean_cd_2d     {fmt(report.mean_cd_2d)}",
        f"  mean_fscore_3d {fmt(report.mean_fscore_3d)}",
        f"  mean_fscore_2d {fmt(report.mean_fscore_2d)}",
    ]
    if report.recovery is not None:
        lines.append(f"  recovery_rate  {fmt(report.recovery.success_rate)}")
        for r in report.recovery.instances:
            status = "ok" if r.success else f"failed ({r.reason})"
            lines.append(f"    {r.instance_id}: {status}")
    if report.mismatched:
        lines.append("mismatched " + " ".join(report.mismatched))
    return "\n".join(lines) + "\n"


def render_report(report: MetricsReport, fmt: ReportFormat) -> bytes:
    if fmt == "json":
        return dumps_model(report).encode("utf-8")
    if fmt == "text":
        return format_text(report).encode("utf-8")
    if fmt == "csv":
        return report_to_frame(report).to_csv(index=False).encode("utf-8")
    if fmt == "xlsx":
        stream = BytesIO()
        with pd.ExcelWriter(stream, engine="openpyxl") as writer:
            _summary_frame(report).to_excel(writer, sheet_name="Summary", index=False)
            report_to_frame(report).to_excel(writer, sheet_name="Details", index=False)
        return stream.getvalue()
    raise InputError(f"unknown report format {fmt!r}")


def write_report(report: MetricsReport, fmt: ReportFormat, path: Path) -> None:
    atomic_write_bytes(Path(path), render_report(report, fmt))

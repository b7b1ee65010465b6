"""Scene-level orchestration: extraction, selection and layout fitting per instance."""

import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import structlog

from src import __version__
from src.core.config import settings
from src.core.errors import (
    InputError,
    OptimizationFailedError,
    SceneFitError,
)
from src.core.files import atomic_write_text
from src.formats.documents import write_model
from src.formats.ply import save_point_cloud
from src.geometry.camera import PinholeIntrinsics
from src.geometry.cloud import PointCloud, apply_transform
from src.metrics.pointcloud import f_score, f_score_arrays
from src.schemas.models import (
    InstanceLayout,
    IntrinsicsModel,
    LayoutParamsModel,
    LossWeights,
    OptimizerConfig,
    SceneLayoutFile,
    SceneManifest,
    SelectionReport,
    SelectionReportFile,
)
from src.services.evaluation_service import THRESHOLD_2D, THRESHOLD_3D, projected_front
from src.services.ingest_service import IngestService, SceneGeometry, filter_detections
from src.services.layout_service import LayoutService, OptimizationTrace
from src.services.selection_service import CandidateSet, SelectionService

logger = structlog.get_logger(__name__)


@dataclass(frozen=True)
class RunOptions:
    config: OptimizerConfig = field(default_factory=OptimizerConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    selection_enabled: bool = True
    jobs: int = 1


@dataclass(frozen=True)
class FitTask:
    index: int
    instance_id: str
    label: str
    target: PointCloud
    candidates: list[PointCloud]
    candidate_paths: list[str]
    cam: PinholeIntrinsics
    options: RunOptions
    max_candidates: int = 5


@dataclass
class InstanceOutcome:
    layout: InstanceLayout
    selection: SelectionReport | None = None
    trace: OptimizationTrace | None = None
    posed: PointCloud | None = None
    timings: dict[str, float] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.layout.status == "ok"


def _finite(value: float) -> float | None:
    return value if math.isfinite(value) else None


def _failed(instance_id: str, label: str, error: SceneFitError) -> InstanceLayout:
    logger.warning("instance_failed", instance_id=instance_id, error=str(error))
    return InstanceLayout(instance_id=instance_id, label=label, status="failed", error=str(error))


def fit_instance(task: FitTask) -> InstanceOutcome:
    """Select a candidate for one instance and fit its layout."""
    opts = task.options
    timings: dict[str, float] = {}
    report: SelectionReport | None = None
    try:
        candidates = CandidateSet(
            task.instance_id, list(enumerate(task.candidates)), task.max_candidates
        )
        start = time.perf_counter()
        selector = SelectionService(opts.selection_enabled, opts.config.seed)
        report = selector.choose(candidates, task.target, task.index)
        timings["selection"] = time.perf_counter() - start

        model = candidates.cloud(report.chosen)
        start = time.perf_counter()
        params, trace = LayoutService(opts.config, opts.weights).optimize(
            model, task.target, task.cam
        )
        timings["optimization"] = time.perf_counter() - start
    except SceneFitError as e:
        return InstanceOutcome(
            layout=_failed(task.instance_id, task.label, e), selection=report, timings=timings
        )

    final = trace.chosen.final_loss
    assert final is not None
    if final.excluded:
        logger.warning(
            "points_behind_camera", instance_id=task.instance_id, excluded=final.excluded
        )
    posed = apply_transform(model, params)
    posed_2d = projected_front(posed, task.cam)
    target_2d = projected_front(task.target, task.cam)
    fscore_2d = (
        f_score_arrays(posed_2d, target_2d, THRESHOLD_2D)
        if len(posed_2d) and len(target_2d)
        else None
    )
    layout = InstanceLayout(
        instance_id=task.instance_id,
        label=task.label,
        candidate_index=report.chosen,
        candidate_path=task.candidate_paths[report.chosen],
        params=LayoutParamsModel.from_params(params),
        chosen_epoch=trace.chosen_epoch,
        failed_epochs=trace.failed_epochs,
        loss3d=_finite(final.loss3d),
        loss2d=_finite(final.loss2d),
        total=_finite(final.total),
        excluded_points=final.excluded,
        fscore_3d=f_score(posed, task.target, THRESHOLD_3D),
        fscore_2d=fscore_2d,
    )
    logger.info(
        "instance_fitted",
        instance_id=task.instance_id,
        candidate=report.chosen,
        epoch=trace.chosen_epoch,
        loss=final.total,
    )
    return InstanceOutcome(layout, report, trace, posed, timings)


def run_tasks(tasks: list[FitTask], jobs: int) -> list[InstanceOutcome]:
    """Fit tasks in order; instances are independent so they can run in worker processes."""
    if jobs <= 1 or len(tasks) <= 1:
        return [fit_instance(task) for task in tasks]
    with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
        return list(pool.map(fit_instance, tasks))


@dataclass
class SceneRun:
    manifest: SceneManifest
    geometry: SceneGeometry
    options: RunOptions
    outcomes: list[InstanceOutcome]

    @property
    def all_failed(self) -> bool:
        return bool(self.outcomes) and not any(o.ok for o in self.outcomes)

    def raise_if_all_failed(self) -> None:
        if not self.all_failed:
            return
        errors = "; ".join(f"{o.layout.instance_id}: {o.layout.error}" for o in self.outcomes)
        message = f"all {len(self.outcomes)} instances failed ({errors})"
        # Instances that never reached selection failed on their inputs.
        if all(o.selection is None for o in self.outcomes):
            raise InputError(message)
        raise OptimizationFailedError(message)

    def scene_cloud(self) -> PointCloud:
        return PointCloud.concat([o.posed for o in self.outcomes if o.posed is not None])


def _relative(path: Path | str, root: Path) -> str:
    return Path(os.path.relpath(Path(path).resolve(), root.resolve())).as_posix()


class PipelineService:
    def __init__(self, ingest: IngestService | None = None):
        self.ingest = ingest or IngestService()

    def _prepare(self, manifest_path: Path) -> tuple[SceneManifest, SceneGeometry]:
        manifest = self.ingest.load_manifest(manifest_path)
        geometry = self.ingest.load_geometry(manifest)
        if not filter_detections(manifest):
            logger.warning(
                "no_detections_above_threshold",
                threshold=manifest.confidence_threshold,
                total=len(manifest.detections),
            )
        return manifest, geometry

    def select(self, manifest_path: Path) -> SelectionReportFile:
        manifest, geometry = self._prepare(manifest_path)
        reports: list[SelectionReport] = []
        failures: list[str] = []
        for det in filter_detections(manifest):
            try:
                target = self.ingest.load_instance_cloud(geometry, det)
                candidates = CandidateSet(
                    det.instance_id,
                    list(enumerate(self.ingest.load_candidates(det))),
                    manifest.max_candidates,
                )
                reports.append(SelectionService().choose(candidates, target, len(reports)))
            except InputError as e:
                logger.error("selection_failed", instance_id=det.instance_id, error=str(e))
                failures.append(f"{det.instance_id}: {e}")
        if failures:
            raise InputError("selection failed for " + "; ".join(failures))

        warnings = [] if filter_detections(manifest) else ["no detections above threshold"]
        return SelectionReportFile(
            tool_version=__version__,
            manifest_path=str(manifest_path),
            reports=reports,
            warnings=warnings,
        )

    def optimize(self, manifest_path: Path, options: RunOptions) -> SceneRun:
        manifest, geometry = self._prepare(manifest_path)
        tasks: list[FitTask] = []
        failed: dict[int, InstanceOutcome] = {}
        extraction: dict[int, float] = {}
        for index, det in enumerate(filter_detections(manifest)):
            start = time.perf_counter()
            try:
                target = self.ingest.load_instance_cloud(geometry, det)
                candidates = self.ingest.load_candidates(det)
            except SceneFitError as e:
                failed[index] = InstanceOutcome(layout=_failed(det.instance_id, det.label, e))
                continue
            finally:
                extraction[index] = time.perf_counter() - start
            tasks.append(
                FitTask(
                    index=index,
                    instance_id=det.instance_id,
                    label=det.label,
                    target=target,
                    candidates=candidates,
                    candidate_paths=[str(p) for p in det.candidate_paths],
                    cam=geometry.cam,
                    options=options,
                    max_candidates=manifest.max_candidates,
                )
            )

        fitted = dict(
            zip((t.index for t in tasks), run_tasks(tasks, options.jobs), strict=True)
        )
        outcomes = []
        for index in sorted(fitted.keys() | failed.keys()):
            outcome = fitted.get(index) or failed[index]
            outcome.timings = {"extraction": extraction[index], **outcome.timings}
            outcomes.append(outcome)
        return SceneRun(manifest, geometry, options, outcomes)

    def write_run(
        self, run: SceneRun, out_dir: Path, manifest_path: Path, created_at: datetime
    ) -> SceneLayoutFile:
        """Write layout file, traces, assembled scene and per-instance PLYs, selection file."""
        out_dir = Path(out_dir)
        instances = []
        for outcome in run.outcomes:
            layout = outcome.layout
            if layout.candidate_path is not None:
                layout = layout.model_copy(
                    update={"candidate_path": _relative(layout.candidate_path, out_dir)}
                )
            instances.append(layout)
            if outcome.trace is not None:
                frame = outcome.trace.to_frame()
                atomic_write_text(
                    out_dir / "traces" / f"{layout.instance_id}.csv",
                    frame.to_csv(index=False, float_format=settings.TRACE_FLOAT_FORMAT),
                )
            if outcome.posed is not None:
                save_point_cloud(outcome.posed, out_dir / "instances" / f"{layout.instance_id}.ply")
        save_point_cloud(run.scene_cloud(), out_dir / "scene.ply")

        opts = run.options
        layout_file = SceneLayoutFile(
            tool_version=__version__,
            seed=opts.config.seed,
            manifest_path=_relative(manifest_path, out_dir),
            intrinsics=IntrinsicsModel.from_intrinsics(run.geometry.cam),
            selection_enabled=opts.selection_enabled,
            weights=opts.weights,
            config=opts.config,
            instances=instances,
        )
        write_model(out_dir / "layout.json", layout_file, {"created_at": created_at.isoformat()})
        # wall-clock seconds per stage and instance
        timings = {o.layout.instance_id: o.timings for o in run.outcomes}
        atomic_write_text(
            out_dir / "timings.json", json.dumps(timings, indent=2, sort_keys=True) + "\n"
        )

        selection = SelectionReportFile(
            tool_version=__version__,
            manifest_path=_relative(manifest_path, out_dir),
            reports=[o.selection for o in run.outcomes if o.selection is not None],
            warnings=[] if run.outcomes else ["no detections above threshold"],
        )
        write_model(out_dir / "selection.json", selection)
        logger.info(
            "layout_written",
            out_dir=str(out_dir),
            instances=len(instances),
            failed=sum(1 for o in run.outcomes if not o.ok),
        )
        return layout_file


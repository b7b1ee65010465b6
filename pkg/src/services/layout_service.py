"""Per-instance layout fitting: combined 3D / projected 2D Chamfer loss minimized with Adam.

Nearest-neighbor correspondences are recomputed at every iterate and held fixed while the
gradient is taken, so the analytic gradient is exact for that fixed-correspondence
surrogate. Each epoch is an independent restart from its own rotation initialization;
the epoch with the lowest end-of-epoch loss wins.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import numpy.typing as npt
import pandas as pd
import structlog

from src.core.errors import (
    AllPointsBehindCameraError,
    DegenerateCloudError,
    NonFiniteGradientError,
    NumericalError,
    OptimizationFailedError,
)
from src.geometry.camera import PinholeIntrinsics, project_points
from src.geometry.cloud import (
    FloatArray,
    LayoutParams,
    PointCloud,
    rotation_matrix,
    rotation_matrix_partials,
)
from src.geometry.index import IntArray, NearestNeighborIndex
from src.schemas.models import LossWeights, OptimizationMode, OptimizerConfig

logger = structlog.get_logger(__name__)

BoolArray = npt.NDArray[np.bool_]


@dataclass(frozen=True)
class LossValue:
    total: float
    loss3d: float
    loss2d: float
    excluded: int = 0


@dataclass(frozen=True)
class Correspondences:
    fwd3: IntArray  # model point -> nearest target point
    bwd3: IntArray  # target point -> nearest model point
    valid2: BoolArray  # model points in front of the camera
    fwd2: IntArray | None  # valid model projection -> nearest target projection
    bwd2: IntArray | None  # target projection -> nearest valid model projection (subset index)


class LossProblem:
    """Fixed data of one instance fit: model, target, camera and weights."""

    def __init__(
        self,
        model: PointCloud,
        target: PointCloud,
        cam: PinholeIntrinsics,
        weights: LossWeights,
        behind_camera_eps: float = 1e-6,
    ):
        self.model = model.require_non_empty().points
        self.target = target.require_non_empty().points
        self.cam = cam
        self.weights = weights
        self.eps = behind_camera_eps
        self.target_index = NearestNeighborIndex(self.target)
        self.model_index = NearestNeighborIndex(self.model)
        # with a zero 2D weight in every phase the projected term is never needed
        self.track_2d = weights.lambda2 != 0.0

        in_front = self.target[:, 2] > self.eps
        self.target_px: FloatArray | None = None
        self.target_px_index: NearestNeighborIndex | None = None
        if in_front.any():
            self.target_px = project_points(self.target[in_front], cam)
            self.target_px_index = NearestNeighborIndex(self.target_px)

    def phase_weights(self, phase: int) -> tuple[float, float]:
        return self.weights.lambda1, (self.weights.lambda2 if phase == 2 else 0.0)

    def correspondences(self, vec: FloatArray, with_2d: bool | None = None) -> Correspondences:
        rot = rotation_matrix(float(vec[3]), float(vec[4]), float(vec[5]))
        q = np.asarray(vec[6] * (self.model @ rot.T) + vec[:3])
        fwd3, _ = self.target_index.query(q)
        # isotropic scale keeps the nearest model point when targets move to the model frame
        bwd3, _ = self.model_index.query(((self.target - vec[:3]) @ rot) / vec[6])
        valid2 = q[:, 2] > self.eps
        fwd2 = bwd2 = None
        want_2d = self.track_2d if with_2d is None else with_2d
        if (
            want_2d
            and valid2.any()
            and self.target_px_index is not None
            and self.target_px is not None
        ):
            qpx = project_points(q[valid2], self.cam)
            fwd2, _ = self.target_px_index.query(qpx)
            bwd2, _ = NearestNeighborIndex(qpx).query(self.target_px)
        return Correspondences(fwd3=fwd3, bwd3=bwd3, valid2=valid2, fwd2=fwd2, bwd2=bwd2)

    def surrogate(
        self, vec: FloatArray, corr: Correspondences, phase: int, with_gradient: bool = True
    ) -> tuple[LossValue, FloatArray | None]:
        """Loss (and gradient) with correspondences held at ``corr``."""
        vec = np.asarray(vec, dtype=np.float64)
        rx, ry, rz, s = float(vec[3]), float(vec[4]), float(vec[5]), float(vec[6])
        rot = rotation_matrix(rx, ry, rz)
        rp = self.model @ rot.T
        q = s * rp + vec[:3]
        n_model, n_target = q.shape[0], self.target.shape[0]
        a3, a2 = self.phase_weights(phase)

        # 3D term
        r_fwd = q - self.target[corr.fwd3]
        r_bwd = q[corr.bwd3] - self.target
        loss3d = float(
            np.mean(np.sum(r_fwd * r_fwd, axis=1)) + np.mean(np.sum(r_bwd * r_bwd, axis=1))
        )
        grad_q = np.zeros_like(q)
        if with_gradient and a3 != 0.0:
            g3 = (2.0 / n_model) * r_fwd
            np.add.at(g3, corr.bwd3, (2.0 / n_target) * r_bwd)
            grad_q += a3 * g3

        # 2D term
        excluded = int(n_model - np.count_nonzero(corr.valid2))
        loss2d = math.nan
        if corr.fwd2 is not None and corr.bwd2 is not None and self.target_px is not None:
            qv = q[corr.valid2]
            z = qv[:, 2]
            f = self.cam.focal
            px = np.stack(
                [f * qv[:, 0] / z + self.cam.cx, f * qv[:, 1] / z + self.cam.cy], axis=1
            )
            e_fwd = px - self.target_px[corr.fwd2]
            e_bwd = px[corr.bwd2] - self.target_px
            loss2d = float(
                np.mean(np.sum(e_fwd * e_fwd, axis=1)) + np.mean(np.sum(e_bwd * e_bwd, axis=1))
            )
            if with_gradient and a2 != 0.0:
                g_px = (2.0 / px.shape[0]) * e_fwd
                np.add.at(g_px, corr.bwd2, (2.0 / self.target_px.shape[0]) * e_bwd)
                g2 = np.empty_like(qv)
                g2[:, 0] = g_px[:, 0] * f / z
                g2[:, 1] = g_px[:, 1] * f / z
                g2[:, 2] = -(g_px[:, 0] * qv[:, 0] + g_px[:, 1] * qv[:, 1]) * f / (z * z)
                grad_q[corr.valid2] += a2 * g2
        if a2 != 0.0 and math.isnan(loss2d):
            raise AllPointsBehindCameraError("no points in front of the camera for the 2D term")

        total = a3 * loss3d + (a2 * loss2d if a2 != 0.0 else 0.0)
        value = LossValue(total=total, loss3d=loss3d, loss2d=loss2d, excluded=excluded)
        if not with_gradient:
            return value, None

        d_rx, d_ry, d_rz = rotation_matrix_partials(rx, ry, rz)
        grad = np.empty(7)
        grad[:3] = grad_q.sum(axis=0)
        grad[3] = s * float(np.sum(grad_q * (self.model @ d_rx.T)))
        grad[4] = s * float(np.sum(grad_q * (self.model @ d_ry.T)))
        grad[5] = s * float(np.sum(grad_q * (self.model @ d_rz.T)))
        grad[6] = float(np.sum(grad_q * rp))
        return value, grad

    def evaluate(self, vec: FloatArray, phase: int) -> tuple[LossValue, FloatArray]:
        value, grad = self.surrogate(vec, self.correspondences(vec), phase)
        assert grad is not None
        return value, grad


def loss_total(
    model: PointCloud,
    target: PointCloud,
    params: LayoutParams,
    cam: PinholeIntrinsics,
    w: LossWeights,
    phase: int,
) -> LossValue:
    problem = LossProblem(model, target, cam, w)
    vec = params.as_vector()
    corr = problem.correspondences(vec, with_2d=True)
    value, _ = problem.surrogate(vec, corr, phase, with_gradient=False)
    return value


def loss_gradient(
    model: PointCloud,
    target: PointCloud,
    params: LayoutParams,
    cam: PinholeIntrinsics,
    w: LossWeights,
    phase: int,
) -> FloatArray:
    """Partials with respect to (tx, ty, tz, rx, ry, rz, s)."""
    _, grad = LossProblem(model, target, cam, w).evaluate(params.as_vector(), phase)
    return grad


# --- Adam ---


@dataclass(frozen=True)
class AdamState:
    m: FloatArray = field(default_factory=lambda: np.zeros(7))
    v: FloatArray = field(default_factory=lambda: np.zeros(7))
    step: int = 0


def adam_step(
    state: AdamState, params: FloatArray, grad: FloatArray, lr: float, config: OptimizerConfig
) -> tuple[FloatArray, AdamState]:
    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradientError(f"non-finite gradient at step {state.step + 1}: {grad}")
    step = state.step + 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    m = b1 * state.m + (1.0 - b1) * grad
    v = b2 * state.v + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1**step)
    v_hat = v / (1.0 - b2**step)
    updated = np.asarray(params, dtype=np.float64) - lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    updated[6] = max(updated[6], config.min_scale)
    return updated, AdamState(m=m, v=v, step=step)


# --- Restarts ---


@dataclass
class EpochTrace:
    epoch: int
    init: LayoutParams
    phase: list[int] = field(default_factory=list)
    loss3d: list[float] = field(default_factory=list)
    loss2d: list[float] = field(default_factory=list)
    total: list[float] = field(default_factory=list)
    excluded: list[int] = field(default_factory=list)
    final_params: LayoutParams | None = None
    final_loss: LossValue | None = None
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None

    @property
    def recorded_loss(self) -> float:
        return math.inf if self.final_loss is None else self.final_loss.total


@dataclass
class OptimizationTrace:
    epochs: list[EpochTrace]
    chosen_epoch: int

    @property
    def chosen(self) -> EpochTrace:
        return self.epochs[self.chosen_epoch]

    @property
    def failed_epochs(self) -> int:
        return sum(1 for e in self.epochs if e.failed)

    def to_frame(self) -> pd.DataFrame:
        frames = [
            pd.DataFrame(
                {
                    "epoch": e.epoch,
                    "iteration": np.arange(len(e.total)),
                    "phase": e.phase,
                    "loss3d": e.loss3d,
                    "loss2d": e.loss2d,
                    "total": e.total,
                    "excluded": e.excluded,
                }
            )
            for e in self.epochs
        ]
        return pd.concat(frames, ignore_index=True)


def effective_weights(weights: LossWeights, mode: OptimizationMode) -> LossWeights:
    if mode is OptimizationMode.ONLY3D:
        return LossWeights(lambda1=weights.lambda1, lambda2=0.0)
    if mode is OptimizationMode.ONLY2D:
        return LossWeights(lambda1=0.0, lambda2=weights.lambda2)
    return weights


def initial_params(
    model: PointCloud, target: PointCloud, epoch: int, seed: int
) -> LayoutParams:
    """Rotation r = 0 for epoch 0, seeded uniform Euler angles otherwise; scale from the
    AABB max-extent ratio; translation aligns the centroids."""
    model_extent = model.aabb().max_extent
    if not model_extent > 0:
        raise DegenerateCloudError()
    scale = target.aabb().max_extent / model_extent
    if not scale > 0:
        raise DegenerateCloudError("zero extent target")
    if epoch == 0:
        angles = np.zeros(3)
    else:
        angles = np.random.default_rng([seed, epoch]).uniform(-math.pi, math.pi, size=3)
    rot = rotation_matrix(*(float(a) for a in angles))
    t = target.centroid() - scale * (rot @ model.centroid())
    return LayoutParams.from_vector([*t, *angles, scale])


class LayoutService:
    def __init__(self, config: OptimizerConfig, weights: LossWeights):
        self.config = config
        self.weights = weights

    def _run_epoch(self, problem: LossProblem, trace: EpochTrace) -> None:
        cfg = self.config
        always_2d = cfg.mode is OptimizationMode.ONLY2D
        vec = trace.init.as_vector()
        state = AdamState()
        for it in range(cfg.iters_per_epoch):
            phase = 2 if always_2d or it >= cfg.phase1_iters else 1
            value, grad = problem.evaluate(vec, phase)
            trace.phase.append(phase)
            trace.loss3d.append(value.loss3d)
            trace.loss2d.append(value.loss2d)
            trace.total.append(value.total)
            trace.excluded.append(value.excluded)
            vec, state = adam_step(state, vec, grad, cfg.lr, cfg)
        final, _ = problem.surrogate(vec, problem.correspondences(vec), 2, with_gradient=False)
        trace.final_params = LayoutParams.from_vector(vec)
        trace.final_loss = final

    def optimize(
        self, model: PointCloud, target: PointCloud, cam: PinholeIntrinsics
    ) -> tuple[LayoutParams, OptimizationTrace]:
        cfg = self.config
        model = model.require_non_empty().stride_subsample(cfg.max_points)
        target = target.require_non_empty().stride_subsample(cfg.max_points)
        problem = LossProblem(
            model, target, cam, effective_weights(self.weights, cfg.mode), cfg.behind_camera_eps
        )

        epochs: list[EpochTrace] = []
        for epoch in range(cfg.epochs):
            trace = EpochTrace(epoch=epoch, init=initial_params(model, target, epoch, cfg.seed))
            try:
                self._run_epoch(problem, trace)
            except NumericalError as e:
                trace.error = str(e)
                logger.warning("epoch_failed", epoch=epoch, error=str(e))
            else:
                logger.debug("epoch_done", epoch=epoch, loss=trace.recorded_loss)
            epochs.append(trace)

        finished = [e for e in epochs if not e.failed]
        if not finished:
            raise OptimizationFailedError(f"all {cfg.epochs} epochs failed")
        best = min(finished, key=lambda e: (e.recorded_loss, e.epoch))
        assert best.final_params is not None
        return best.final_params, OptimizationTrace(epochs=epochs, chosen_epoch=best.epoch)


def optimize_layout(
    model: PointCloud,
    target: PointCloud,
    cam: PinholeIntrinsics,
    weights: LossWeights,
    config: OptimizerConfig,
) -> tuple[LayoutParams, OptimizationTrace]:
    return LayoutService(config, weights).optimize(model, target, cam)

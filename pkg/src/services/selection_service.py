import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
import structlog

from src.core.errors import DegenerateCloudError, InputError
from src.geometry.cloud import PointCloud, normalize_cloud
from src.geometry.index import NearestNeighborIndex
from src.metrics.pointcloud import chamfer_arrays
from src.schemas.models import SelectionReport

logger = structlog.get_logger(__name__)

DEFAULT_MAX_CANDIDATES = 5


@dataclass(frozen=True)
class CandidateSet:
    instance_id: str
    candidates: list[tuple[int, PointCloud]]
    max_candidates: int = DEFAULT_MAX_CANDIDATES

    def __post_init__(self) -> None:
        if not 1 <= len(self.candidates) <= self.max_candidates:
            raise InputError(
                f"{self.instance_id}: expected 1..{self.max_candidates} candidates, "
                f"got {len(self.candidates)}"
            )
        for k, cloud in self.candidates:
            if cloud.is_empty:
                raise InputError(f"{self.instance_id}: candidate {k} is empty")

    @classmethod
    def from_clouds(
        cls,
        instance_id: str,
        clouds: list[PointCloud],
        max_candidates: int = DEFAULT_MAX_CANDIDATES,
    ) -> "CandidateSet":
        return cls(instance_id, list(enumerate(clouds)), max_candidates)

    def cloud(self, index: int) -> PointCloud:
        for k, cloud in self.candidates:
            if k == index:
                return cloud
        raise KeyError(index)


def select_model(candidates: CandidateSet, target: PointCloud) -> SelectionReport:
    """Pick the candidate with the lowest Chamfer distance after normalizing both sides."""
    normalized_target, _ = normalize_cloud(target.require_non_empty())
    target_index = NearestNeighborIndex(normalized_target.points)

    scores: list[float] = []
    for k, cloud in candidates.candidates:
        try:
            normalized, _ = normalize_cloud(cloud)
        except DegenerateCloudError:
            logger.warning("degenerate_candidate", instance_id=candidates.instance_id, candidate=k)
            scores.append(math.inf)
            continue
        scores.append(
            chamfer_arrays(normalized.points, normalized_target.points, index_b=target_index)
        )

    if all(math.isinf(s) for s in scores):
        raise DegenerateCloudError(f"{candidates.instance_id}: every candidate has zero extent")
    # argmin keeps the first (lowest-index) minimum
    best = int(np.argmin(scores))
    return SelectionReport(
        instance_id=candidates.instance_id,
        scores=scores,
        chosen=candidates.candidates[best][0],
        method="chamfer",
    )


def selection_ablation_passthrough(
    candidates: CandidateSet, seed: int | Sequence[int]
) -> SelectionReport:
    """Uniformly random candidate, reproducible from ``seed``."""
    pick = int(np.random.default_rng(seed).integers(len(candidates.candidates)))
    return SelectionReport(
        instance_id=candidates.instance_id,
        scores=None,
        chosen=candidates.candidates[pick][0],
        method="random",
    )


class SelectionService:
    """Chamfer selection, or the seeded random passthrough when selection is disabled."""

    def __init__(self, enabled: bool = True, seed: int = 0):
        self.enabled = enabled
        self.seed = seed

    def choose(self, candidates: CandidateSet, target: PointCloud, index: int) -> SelectionReport:
        if self.enabled:
            return select_model(candidates, target)
        report = selection_ablation_passthrough(candidates, [self.seed, index])
        logger.info("selection_skipped", instance_id=candidates.instance_id, chosen=report.chosen)
        return report

from pathlib import Path

import numpy as np
import pytest

from src.geometry.camera import PinholeIntrinsics
from src.geometry.cloud import LayoutParams, PointCloud
from src.schemas.models import (
    BenchConfig,
    CameraConfig,
    LayoutParamsModel,
    PrimitiveConfig,
    PrimitiveShape,
)
from src.services.synthetic_service import (
    PrimitiveSpec,
    SyntheticJob,
    SyntheticService,
    sample_surface,
)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def camera() -> PinholeIntrinsics:
    return PinholeIntrinsics.centered(160.0, 192, 144)


@pytest.fixture
def bracket_spec() -> PrimitiveSpec:
    return PrimitiveSpec(
        shape=PrimitiveShape.L_BRACKET,
        canonical_size=1.0,
        pose=LayoutParams(t=(0.0, 0.0, 3.0)),
        label="bracket",
        point_budget=512,
    )


@pytest.fixture
def bracket_cloud(bracket_spec: PrimitiveSpec) -> PointCloud:
    return sample_surface(bracket_spec, 512, seed=0)


@pytest.fixture
def small_bench() -> BenchConfig:
    """Three well separated primitives in a small frame."""

    def pose(t: tuple[float, float, float], r: tuple[float, float, float]) -> LayoutParamsModel:
        return LayoutParamsModel(t=t, r=r, s=1.0)

    return BenchConfig(
        camera=CameraConfig(focal=80.0, width=96, height=72),
        primitives=[
            PrimitiveConfig(
                shape=PrimitiveShape.SPHERE,
                canonical_size=0.8,
                pose=pose((-1.3, -0.4, 4.0), (0.0, 0.0, 0.0)),
                point_budget=256,
            ),
            PrimitiveConfig(
                shape=PrimitiveShape.BOX,
                canonical_size=0.8,
                pose=pose((0.0, 0.5, 4.2), (0.1, 0.15, 0.05)),
                point_budget=256,
            ),
            PrimitiveConfig(
                shape=PrimitiveShape.L_BRACKET,
                canonical_size=0.8,
                pose=pose((1.3, -0.3, 4.0), (0.1, -0.12, 0.08)),
                point_budget=256,
            ),
        ],
        candidates_per_instance=3,
    )


@pytest.fixture
def synthetic_job(tmp_path: Path, small_bench: BenchConfig) -> SyntheticJob:
    return SyntheticService(small_bench, seed=3).write_job(tmp_path / "job")

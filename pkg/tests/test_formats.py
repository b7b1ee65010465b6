from pathlib import Path

import numpy as np
import pytest
from plyfile import PlyData, PlyElement

from src.core.errors import ConfigError, FormatError
from src.formats.documents import load_config, read_document, read_layout_file, write_model
from src.formats.ply import load_point_cloud, save_point_cloud
from src.formats.raster import (
    read_mask,
    read_pfm,
    read_pfm_header,
    read_pgm_size,
    write_mask,
    write_pfm,
)
from src.geometry.cloud import PointCloud
from src.schemas.models import (
    BenchConfig,
    IntrinsicsModel,
    LossWeights,
    OptimizerConfig,
    SceneLayoutFile,
)


def test_ply_binary_round_trip_is_lossless(tmp_path: Path, rng: np.random.Generator) -> None:
    cloud = PointCloud(rng.normal(size=(1000, 3)))
    save_point_cloud(cloud, tmp_path / "cloud.ply")
    loaded = load_point_cloud(tmp_path / "cloud.ply")
    assert loaded.points.tobytes() == cloud.points.tobytes()


def test_ply_ascii_single_vertex(tmp_path: Path) -> None:
    path = tmp_path / "one.ply"
    path.write_text(
        "ply\nformat ascii 1.0\nelement vertex 1\n"
        "property float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n"
    )
    np.testing.assert_array_equal(load_point_cloud(path).points, [[0.0, 0.0, 0.0]])


def test_ply_ignores_extra_properties(tmp_path: Path) -> None:
    path = tmp_path / "colored.ply"
    path.write_text(
        "ply\nformat ascii 1.0\ncomment made by hand\nelement vertex 2\n"
        "property uchar red\nproperty double x\nproperty double y\nproperty double z\n"
        "end_header\n255 1 2 3\n0 4 5 6\n"
    )
    np.testing.assert_array_equal(load_point_cloud(path).points, [[1, 2, 3], [4, 5, 6]])


def test_ply_count_mismatch(tmp_path: Path) -> None:
    path = tmp_path / "short.ply"
    body = "".join(f"{i} {i} {i}\n" for i in range(9))
    path.write_text(
        "ply\nformat ascii 1.0\nelement vertex 10\n"
        "property float x\nproperty float y\nproperty float z\nend_header\n" + body
    )
    with pytest.raises(FormatError, match="element count mismatch"):
        load_point_cloud(path)


def test_ply_rejects_missing_magic(tmp_path: Path) -> None:
    path = tmp_path / "bad.ply"
    path.write_text("not a ply\n")
    with pytest.raises(FormatError, match="malformed header"):
        load_point_cloud(path)


def test_ply_header_of_saved_cloud(tmp_path: Path) -> None:
    save_point_cloud(PointCloud(np.eye(3)), tmp_path / "eye.ply")
    raw = (tmp_path / "eye.ply").read_bytes()
    header = raw[: raw.index(b"end_header")].decode("ascii")
    assert "format binary_little_endian 1.0" in header
    assert "element vertex 3" in header
    assert [ln for ln in header.splitlines() if ln.startswith("property")] == [
        "property double x",
        "property double y",
        "property double z",
    ]
    assert len(raw) - raw.index(b"end_header\n") - len(b"end_header\n") == 3 * 3 * 8


def test_ply_reads_float32_binary_with_extra_properties(tmp_path: Path) -> None:
    table = np.array(
        [(1.5, -2.0, 3.25, 7), (0.0, 0.5, 4.0, 9)],
        dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("label", "u1")],
    )
    PlyData([PlyElement.describe(table, "vertex")], byte_order="<").write(
        str(tmp_path / "f32.ply")
    )
    np.testing.assert_array_equal(
        load_point_cloud(tmp_path / "f32.ply").points, [[1.5, -2.0, 3.25], [0.0, 0.5, 4.0]]
    )


def test_ply_truncated_binary_body(tmp_path: Path, rng: np.random.Generator) -> None:
    save_point_cloud(PointCloud(rng.normal(size=(10, 3))), tmp_path / "full.ply")
    path = tmp_path / "cut.ply"
    path.write_bytes((tmp_path / "full.ply").read_bytes()[:-24])
    with pytest.raises(FormatError, match="element count mismatch"):
        load_point_cloud(path)


@pytest.mark.parametrize(
    "header",
    [
        "element face 0\nproperty list uchar int vertex_indices\n",
        "element vertex 0\nproperty int x\nproperty float y\nproperty float z\n",
    ],
)
def test_ply_rejects_unusable_vertex_element(tmp_path: Path, header: str) -> None:
    path = tmp_path / "odd.ply"
    path.write_text("ply\nformat ascii 1.0\n" + header + "end_header\n")
    with pytest.raises(FormatError, match="malformed header"):
        load_point_cloud(path)


def test_pfm_depth_and_pointmap_round_trip(tmp_path: Path, rng: np.random.Generator) -> None:
    depth = rng.uniform(1, 5, size=(6, 4)).astype(np.float32).astype(np.float64)
    write_pfm(tmp_path / "depth.pfm", depth)
    assert read_pfm_header(tmp_path / "depth.pfm") == (4, 6, 1)
    np.testing.assert_array_equal(read_pfm(tmp_path / "depth.pfm"), depth)

    points = rng.normal(size=(3, 5, 3)).astype(np.float32).astype(np.float64)
    write_pfm(tmp_path / "pm.pfm", points)
    assert read_pfm_header(tmp_path / "pm.pfm") == (5, 3, 3)
    np.testing.assert_array_equal(read_pfm(tmp_path / "pm.pfm"), points)


def test_pfm_stores_rows_bottom_to_top(tmp_path: Path) -> None:
    grid = np.array([[1.0, 2.0], [3.0, 4.0]])
    write_pfm(tmp_path / "d.pfm", grid)
    raw = (tmp_path / "d.pfm").read_bytes()
    body = np.frombuffer(raw[raw.index(b"-1.0\n") + 5 :], dtype="<f4")
    np.testing.assert_array_equal(body, [3.0, 4.0, 1.0, 2.0])


def test_pfm_truncated_body(tmp_path: Path) -> None:
    path = tmp_path / "cut.pfm"
    path.write_bytes(b"Pf\n2 2\n-1.0\n" + b"\x00" * 8)
    with pytest.raises(FormatError):
        read_pfm(path)


def test_mask_threshold(tmp_path: Path) -> None:
    path = tmp_path / "mask.pgm"
    path.write_bytes(b"P5\n3 1\n255\n" + bytes([127, 128, 255]))
    assert read_pgm_size(path) == (3, 1)
    np.testing.assert_array_equal(read_mask(path), [[False, True, True]])

    write_mask(tmp_path / "out.pgm", np.array([[True, False], [False, True]]))
    np.testing.assert_array_equal(
        read_mask(tmp_path / "out.pgm"), [[True, False], [False, True]]
    )


def test_layout_document_header_is_separate_from_body(tmp_path: Path) -> None:
    layout = SceneLayoutFile(
        tool_version="0.1.0",
        seed=4,
        manifest_path="manifest.json",
        intrinsics=IntrinsicsModel(focal=10.0, cx=2.0, cy=2.0, width=4, height=4),
        selection_enabled=True,
        weights=LossWeights(),
        config=OptimizerConfig(),
        instances=[],
    )
    path = tmp_path / "layout.json"
    write_model(path, layout, {"created_at": "2026-01-01T00:00:00+00:00"})
    header, parsed = read_layout_file(path)
    assert header == {"created_at": "2026-01-01T00:00:00+00:00"}
    assert parsed == layout

    _, body = read_document(path)
    assert body["kind"] == "scene_layout"


def test_load_config_reports_field(tmp_path: Path) -> None:
    path = tmp_path / "bench.json"
    path.write_text('{"camera": {"focal": -1}}')
    with pytest.raises(ConfigError) as excinfo:
        load_config(path, BenchConfig)
    assert excinfo.value.field == "camera.focal"

    path.write_text("{")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(path, BenchConfig)

"""PLY point-cloud codec on top of ``plyfile``.

Any PLY encoding ``plyfile`` understands can be read, as long as the ``vertex`` element
carries float or double ``x``, ``y``, ``z`` properties; other properties are ignored.
Writes binary little-endian with double coordinates so that save/load is lossless.
"""

from io import BytesIO
from pathlib import Path

import numpy as np
from plyfile import (
    PlyData,
    PlyElement,
    PlyElementParseError,
    PlyHeaderParseError,
    PlyListProperty,
)

from src.core.errors import FormatError, InputError
from src.core.files import atomic_write_bytes
from src.geometry.cloud import PointCloud

_AXES = ("x", "y", "z")
_VERTEX_DTYPE = np.dtype([(axis, "<f8") for axis in _AXES])


def _vertex_element(path: Path, ply: PlyData) -> PlyElement:
    vertex = next((e for e in ply.elements if e.name == "vertex"), None)
    if vertex is None:
        raise FormatError(path, "malformed header: no vertex element")
    props = {p.name: p for p in vertex.properties}
    for axis in _AXES:
        prop = props.get(axis)
        if prop is None or isinstance(prop, PlyListProperty) or prop.val_dtype not in ("f4", "f8"):
            raise FormatError(path, f"malformed header: vertex needs float {axis!r}")
    return vertex


def load_point_cloud(path: Path) -> PointCloud:
    path = Path(path)
    try:
        with path.open("rb") as stream:
            ply = PlyData.read(stream, mmap=False)
    except OSError as e:
        raise FormatError(path, f"cannot read file: {e.strerror}") from e
    except PlyHeaderParseError as e:
        raise FormatError(path, f"malformed header: {e.message}") from e
    except PlyElementParseError as e:
        name = e.element.name if e.element is not None else "element"
        if "end-of-file" in e.message:
            raise FormatError(path, f"element count mismatch in {name!r}") from e
        raise FormatError(path, f"malformed {name!r} data: {e.message}") from e
    except UnicodeDecodeError as e:
        raise FormatError(path, "malformed header: not ASCII") from e

    vertex = _vertex_element(path, ply)
    points = np.stack([np.asarray(vertex[axis], dtype=np.float64) for axis in _AXES], axis=1)
    if not np.all(np.isfinite(points)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(points), axis=1))[0])
        raise FormatError(path, f"non-finite coordinate in vertex {bad}")
    try:
        return PointCloud(points.reshape(-1, 3))
    except InputError as e:
        raise FormatError(path, str(e)) from e


def encode_point_cloud(cloud: PointCloud) -> bytes:
    table = np.empty(len(cloud), dtype=_VERTEX_DTYPE)
    for i, axis in enumerate(_AXES):
        table[axis] = cloud.points[:, i]
    buffer = BytesIO()
    PlyData([PlyElement.describe(table, "vertex")], text=False, byte_order="<").write(buffer)
    return buffer.getvalue()


def save_point_cloud(cloud: PointCloud, path: Path) -> None:
    atomic_write_bytes(Path(path), encode_point_cloud(cloud))

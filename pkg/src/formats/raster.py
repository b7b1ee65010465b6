"""PGM (P5) masks and PFM depth / pointmap rasters."""

import re
from pathlib import Path

import numpy as np

from src.core.errors import FormatError
from src.core.files import atomic_write_bytes
from src.geometry.cloud import FloatArray

_PGM_HEADER = re.compile(rb"\AP5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+(\d+)\s")
_PFM_HEADER = re.compile(rb"\A(P[Ff])\s+(\d+)\s+(\d+)\s+([-+0-9.eE]+)\s")

MASK_SELECT_THRESHOLD = 127


def _read(path: Path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise FormatError(path, f"cannot read file: {e.strerror}") from e


def read_pgm_size(path: Path) -> tuple[int, int]:
    match = _PGM_HEADER.match(_read(path)[:256])
    if not match:
        raise FormatError(path, "malformed PGM header (expected binary P5)")
    return int(match.group(1)), int(match.group(2))


def read_pgm(path: Path) -> np.ndarray:
    """Return the raw 8-bit grid shaped (height, width)."""
    raw = _read(path)
    match = _PGM_HEADER.match(raw)
    if not match:
        raise FormatError(path, "malformed PGM header (expected binary P5)")
    width, height, maxval = (int(g) for g in match.groups())
    if maxval != 255:
        raise FormatError(path, f"unsupported PGM maxval {maxval} (expected 255)")
    data = raw[match.end() :]
    if len(data) != width * height:
        raise FormatError(path, f"PGM body has {len(data)} bytes, expected {width * height}")
    return np.frombuffer(data, dtype=np.uint8).reshape(height, width).copy()


def read_mask(path: Path) -> np.ndarray:
    return read_pgm(path) > MASK_SELECT_THRESHOLD


def encode_pgm(grid: np.ndarray) -> bytes:
    grid = np.asarray(grid, dtype=np.uint8)
    height, width = grid.shape
    return f"P5\n{width} {height}\n255\n".encode("ascii") + grid.tobytes()


def write_mask(path: Path, bits: np.ndarray) -> None:
    atomic_write_bytes(Path(path), encode_pgm(np.where(bits, 255, 0)))


def read_pfm_header(path: Path) -> tuple[int, int, int]:
    """(width, height, channels)."""
    match = _PFM_HEADER.match(_read(path)[:256])
    if not match:
        raise FormatError(path, "malformed PFM header")
    channels = 3 if match.group(1) == b"PF" else 1
    return int(match.group(2)), int(match.group(3)), channels


def read_pfm(path: Path) -> FloatArray:
    """Rows come back top-to-bottom; shape (H, W) for Pf and (H, W, 3) for PF."""
    raw = _read(path)
    match = _PFM_HEADER.match(raw)
    if not match:
        raise FormatError(path, "malformed PFM header")
    channels = 3 if match.group(1) == b"PF" else 1
    width, height = int(match.group(2)), int(match.group(3))
    try:
        scale = float(match.group(4))
    except ValueError as e:
        raise FormatError(path, "malformed PFM scale") from e
    if scale == 0:
        raise FormatError(path, "malformed PFM scale")
    dtype = "<f4" if scale < 0 else ">f4"
    count = width * height * channels
    data = raw[match.end() :]
    if len(data) != count * 4:
        raise FormatError(path, f"PFM body has {len(data)} bytes, expected {count * 4}")
    grid = np.frombuffer(data, dtype=dtype).astype(np.float64)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return np.ascontiguousarray(np.flipud(grid.reshape(shape)))


def encode_pfm(grid: np.ndarray) -> bytes:
    grid = np.asarray(grid, dtype=np.float64)
    tag = "PF" if grid.ndim == 3 else "Pf"
    height, width = grid.shape[:2]
    header = f"{tag}\n{width} {height}\n-1.0\n".encode("ascii")
    return header + np.ascontiguousarray(np.flipud(grid), dtype="<f4").tobytes()


def write_pfm(path: Path, grid: np.ndarray) -> None:
    atomic_write_bytes(Path(path), encode_pfm(grid))

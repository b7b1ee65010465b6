"""JSON documents written by the pipeline: layout files, selection reports, sidecars.

A layout file may start with ``# key: value`` header lines (the creation timestamp); the JSON
body that follows is deterministic for a fixed seed.
"""

import json
from pathlib import Path
from typing import Any, TypeVar

from pydantic import BaseModel, ValidationError

from src.core.errors import ConfigError, FormatError
from src.core.files import atomic_write_text
from src.schemas.models import GroundTruthSidecar, SceneLayoutFile

ModelT = TypeVar("ModelT", bound=BaseModel)


def dumps_model(model: BaseModel) -> str:
    return json.dumps(model.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def write_model(path: Path, model: BaseModel, header: dict[str, Any] | None = None) -> None:
    lines = [f"# {key}: {value}\n" for key, value in (header or {}).items()]
    atomic_write_text(Path(path), "".join(lines) + dumps_model(model))


def read_document(path: Path) -> tuple[dict[str, str], dict[str, Any]]:
    """Split a document into its header mapping and its parsed JSON body."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise FormatError(path, f"cannot read file: {e.strerror}") from e

    header: dict[str, str] = {}
    body_lines = []
    for line in text.splitlines(keepends=True):
        if not body_lines and line.startswith("#"):
            key, _, value = line[1:].partition(":")
            header[key.strip()] = value.strip()
        else:
            body_lines.append(line)
    try:
        body = json.loads("".join(body_lines))
    except json.JSONDecodeError as e:
        raise FormatError(path, f"invalid JSON: {e}") from e
    if not isinstance(body, dict):
        raise FormatError(path, "expected a JSON object")
    return header, body


def parse_model(path: Path, body: dict[str, Any], model: type[ModelT]) -> ModelT:
    try:
        return model.model_validate(body)
    except ValidationError as e:
        err = e.errors()[0]
        location = ".".join(str(part) for part in err["loc"]) or "<root>"
        raise FormatError(path, f"{location}: {err['msg']}") from e


def read_layout_file(path: Path) -> tuple[dict[str, str], SceneLayoutFile]:
    header, body = read_document(path)
    return header, parse_model(path, body, SceneLayoutFile)


def read_sidecar(path: Path) -> GroundTruthSidecar:
    _, body = read_document(path)
    return parse_model(path, body, GroundTruthSidecar)


def load_config(path: Path, model: type[ModelT]) -> ModelT:
    """Validate a JSON configuration file, reporting the failing field."""
    path = Path(path)
    try:
        body = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(path, "<file>", f"cannot read config: {e.strerror}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(path, "<root>", f"invalid JSON: {e}") from e
    try:
        return model.model_validate(body)
    except ValidationError as e:
        err = e.errors()[0]
        location = ".".join(str(part) for part in err["loc"]) or "<root>"
        raise ConfigError(path, location, err["msg"]) from e

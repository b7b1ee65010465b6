from pathlib import Path


class SceneFitError(Exception):
    """Base error. Anything not classified as bad input is an internal numerical failure."""

    exit_code = 2


class InputError(SceneFitError, ValueError):
    exit_code = 1


class NumericalError(SceneFitError):
    exit_code = 2


class ManifestError(InputError):
    def __init__(self, path: Path | str, field: str, message: str):
        self.path = Path(path)
        self.field = field
        super().__init__(f"{self.path}: {field}: {message}")


class ConfigError(InputError):
    def __init__(self, path: Path | str, field: str, message: str):
        self.path = Path(path)
        self.field = field
        super().__init__(f"{self.path}: {field}: {message}")


class FormatError(InputError):
    def __init__(self, path: Path | str, message: str):
        self.path = Path(path)
        super().__init__(f"{self.path}: {message}")


class EmptyCloudError(InputError):
    def __init__(self, message: str = "empty cloud"):
        super().__init__(message)


class EmptyInstanceError(InputError):
    def __init__(self, message: str = "empty instance"):
        super().__init__(message)


class DegenerateCloudError(InputError):
    def __init__(self, message: str = "zero extent"):
        super().__init__(message)


class DimensionMismatchError(InputError):
    pass


class BehindCameraError(InputError):
    def __init__(self, index: int, z: float):
        self.index = index
        self.z = z
        super().__init__(f"point behind camera at index {index} (z={z!r})")


class DegeneratePointmapError(InputError):
    def __init__(self, message: str = "degenerate pointmap"):
        super().__init__(message)


class NonFiniteGradientError(NumericalError):
    pass


class AllPointsBehindCameraError(NumericalError):
    pass


class OptimizationFailedError(NumericalError):
    pass

from __future__ import annotations

from typing import Any


class MusicflowError(Exception):
    """Base class for every error the pipeline reports on purpose."""


class ShapeError(MusicflowError, ValueError):
    def __init__(self, op: str, *shapes: tuple[int, ...]) -> None:
        self.op = op
        self.shapes = shapes
        pretty = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {pretty}")


class NonFiniteError(MusicflowError, FloatingPointError):
    pass


class SolverError(MusicflowError, RuntimeError):
    def __init__(self, message: str, trajectory: list[Any], stats: dict[str, Any]) -> None:
        super().__init__(message)
        self.trajectory = trajectory
        self.stats = stats


class TrainingAborted(MusicflowError, RuntimeError):
    pass


class UndefinedMetricError(MusicflowError, ValueError):
    pass


class MissingArtifactError(MusicflowError, FileNotFoundError):
    def __init__(self, what: str, path: object) -> None:
        self.what = what
        self.path = path
        super().__init__(f"Missing {what}: {path} (run the stage that produces it first)")


class ConfigError(MusicflowError, ValueError):
    pass


class ReproducibilityGuardError(MusicflowError, RuntimeError):
    pass


class ArtifactWriteError(MusicflowError, OSError):
    pass


class ArtifactReadError(MusicflowError, OSError):
    pass

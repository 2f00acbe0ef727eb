"""Exception types shared across the pipeline."""


class RailDefectError(Exception):
    """Base class for all pipeline errors."""


class ManifestError(RailDefectError):
    """Malformed manifest document or record."""


class ValidationError(RailDefectError):
    """Manifest content inconsistent with the filesystem or its own counts."""


class ConfigError(RailDefectError):
    """Invalid configuration value."""


class CheckpointError(RailDefectError):
    """Unreadable checkpoint or parameter-shape mismatch."""


class TrainingDivergedError(RailDefectError):
    """Non-finite loss encountered; message carries epoch/batch indices."""


class UndefinedMetricError(RailDefectError):
    """Metric has no defined value for the given inputs (e.g. single-class AUC)."""


class UnsupportedArchitectureError(RailDefectError):
    """Model does not expose the structure an operation needs."""


class ConvergenceError(RailDefectError):
    """Iterative procedure failed to reach its tolerance."""


class NotFoundError(RailDefectError):
    """Lookup by id failed."""


class StageFailure(RailDefectError):
    """A pipeline stage aborted; carries the stage name."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage

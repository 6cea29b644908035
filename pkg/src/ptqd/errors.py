"""Exception types shared across the toolkit."""


class PTQDError(Exception):
    """Base class for all toolkit errors."""


class InvalidConfigError(PTQDError, ValueError):
    """A configuration value violates its documented constraints."""


class InvalidInputError(PTQDError, ValueError):
    """An input tensor or argument violates a precondition."""


class InvalidStepError(PTQDError, ValueError):
    """A diffusion step index lies outside the schedule range."""


class InvalidScheduleError(PTQDError, ValueError):
    """Schedule constants are inconsistent with the requested operation."""


class DegenerateStatisticsError(PTQDError, ValueError):
    """A statistic is undefined for the given data (e.g. zero variance)."""


class UncalibratedError(PTQDError, RuntimeError):
    """A quantized component is used before its calibration exists."""


class VSCUnavailableError(PTQDError, ValueError):
    """Variance schedule calibration requested with a zero noise schedule."""


class TrainingFailureError(PTQDError, RuntimeError):
    """Training diverged; carries diagnostics in the message."""


class UnsupportedVersionError(PTQDError, ValueError):
    """A persisted artifact declares a version this code cannot read."""


class ArtifactParseError(PTQDError, ValueError):
    """A persisted artifact is malformed; reports the byte offset."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message)
        self.offset = offset


class StageError(PTQDError, RuntimeError):
    """A pipeline stage failed; carries the stage name and exit code."""

    def __init__(self, stage: str, code: int, message: str):
        super().__init__(f"stage={stage} code={code}: {message}")
        self.stage = stage
        self.code = code

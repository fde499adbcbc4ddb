"""Exception types shared across the package."""


class GaitkitError(Exception):
    """Base class for all errors raised by gaitkit."""


class DimensionError(GaitkitError, ValueError):
    """An array has the wrong extent along a named axis."""

    def __init__(self, axis: str, expected, got, where: str = ""):
        self.axis = axis
        self.expected = expected
        self.got = got
        self.where = where
        prefix = f"{where}: " if where else ""
        super().__init__(f"{prefix}axis '{axis}' expected {expected}, got {got}")


class FormatError(GaitkitError, ValueError):
    """A binary file does not follow its declared layout."""

    def __init__(self, message: str, field: str | None = None, path=None):
        self.field = field
        self.path = path
        where = f" ({path})" if path is not None else ""
        super().__init__(f"{message}{where}")


class ConfigError(GaitkitError, ValueError):
    """A configuration document is invalid or inconsistent."""


class CheckpointMismatchError(GaitkitError):
    """A checkpoint was produced by a different experiment configuration."""


class TrainingAborted(GaitkitError, RuntimeError):
    """Training stopped because the loss became non-finite."""

    def __init__(self, message: str, iteration: int, batch_indices=None):
        self.iteration = iteration
        self.batch_indices = list(batch_indices or [])
        super().__init__(message)

__all__ = ["DiffClassifierError", "ConfigurationError", "NumericError", "CheckpointError"]


class DiffClassifierError(Exception):
    """Base class for every error raised by diffclassifier."""


class ConfigurationError(DiffClassifierError):
    """Invalid parameters or config. `field` is the dotted path of the offending key."""

    def __init__(self, field, message):
        self.field = field
        self.message = message
        super().__init__(f"{field}: {message}")


class NumericError(DiffClassifierError):
    """Numerical failure (singular covariance, NaN loss)."""

    def __init__(self, message, class_index=None, step=None):
        self.class_index = class_index
        self.step = step
        super().__init__(message)


class CheckpointError(DiffClassifierError):
    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)

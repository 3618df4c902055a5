"""Exception hierarchy shared by all modules."""


class DeskBertError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(DeskBertError, ValueError):
    pass


class InputError(DeskBertError, ValueError):
    pass


class DataError(DeskBertError, ValueError):
    pass


class NumericError(DeskBertError, ArithmeticError):
    def __init__(self, message: str, tensor: str | None = None):
        super().__init__(message)
        self.tensor = tensor


class MetricError(DeskBertError, ValueError):
    pass


class AggregationError(DeskBertError, ValueError):
    pass


class SelectionError(DeskBertError, ValueError):
    pass


class CheckpointError(DeskBertError, IOError):
    pass


class FormatError(CheckpointError):
    """Bad magic bytes or structurally invalid file."""


class VersionError(CheckpointError):
    pass


class CorruptionError(CheckpointError):
    """File ended early or a block has inconsistent lengths."""

"""Exception types shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 1,
DataError -> 2, NumericError -> 3.
"""


class QuizTraceError(Exception):
    """Base class for all package errors."""


class ShapeError(QuizTraceError):
    """Operands have incompatible shapes; message names both."""


class DegenerateInputError(QuizTraceError):
    """An input with no usable entries (e.g. fully masked row)."""


class StaleGraphError(QuizTraceError):
    """backward() called without a recorded forward pass."""


class NumericError(QuizTraceError):
    """Non-finite values or violated numeric contracts."""


class ConfigError(QuizTraceError):
    """Invalid configuration or command usage."""


class DataError(QuizTraceError):
    """Malformed input data; carries a line number where known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SchemaError(DataError):
    """Input file header does not match the documented schema."""


class UndefinedMetricError(QuizTraceError):
    """Metric is undefined for the given inputs (e.g. one-class AUC)."""


class CheckpointMismatchError(ConfigError):
    """Checkpoint is incompatible with the requested configuration."""

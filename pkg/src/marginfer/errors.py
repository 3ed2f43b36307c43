"""Exception types shared across the package.

Each carries the CLI exit code it maps to, so the command layer can translate
failures without a lookup table.
"""


class MarginferError(Exception):
    exit_code = 1


class ConfigError(MarginferError, ValueError):
    """Bad configuration: non-SPD matrices, mismatched dimensions, bad flags."""

    exit_code = 2


class FormatError(MarginferError, ValueError):
    """Malformed on-disk file. ``offset`` is the byte position of the problem."""

    exit_code = 2

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(MarginferError, ArithmeticError):
    exit_code = 4


class TrainingError(NumericError):
    """Non-finite loss during optimization."""

    def __init__(self, message, epoch=None, batch=None):
        if epoch is not None:
            message = f"{message} (epoch {epoch}, batch {batch})"
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class DiagnosticError(MarginferError, ValueError):
    """A diagnostic cannot be computed reliably (e.g. chain too short)."""

    exit_code = 4


class ValidationFailure(MarginferError):
    exit_code = 3

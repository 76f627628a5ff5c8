"""Exception hierarchy shared by every uamf module.

The CLI maps these onto exit codes: usage problems exit 1, data problems
exit 2, numeric problems exit 3.
"""


class UAMFError(Exception):
    """Base class for all library errors."""


class UsageError(UAMFError):
    """Caller passed something the API cannot accept (bad flag, non-scalar loss, ...)."""


class ConfigError(UsageError):
    """Inconsistent architecture, generator or training configuration."""


class DimensionError(UAMFError, ValueError):
    """Operand shapes are incompatible."""


class DataError(UAMFError):
    """Malformed or out-of-range input data."""


class EmptyInputError(DataError):
    """An operation received an empty stream or dataset."""


class NumericError(UAMFError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class CheckpointError(DataError):
    """Base class for checkpoint read failures."""


class CheckpointVersionError(CheckpointError):
    """Bad magic bytes or an unsupported format version."""


class CheckpointTruncatedError(CheckpointError):
    """File ended before the declared content was read."""


class CheckpointShapeError(CheckpointError):
    """Stored parameter inventory does not match the target model."""

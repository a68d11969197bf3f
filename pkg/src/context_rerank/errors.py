"""Exception hierarchy shared across the package.

Each class maps to a CLI exit code: usage errors exit 2, data errors 3,
numeric errors 4.
"""


class RerankError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class UsageError(RerankError):
    """Bad arguments, incompatible configuration, misuse of an API."""

    exit_code = 2


class ConfigError(UsageError):
    """Invalid or inconsistent configuration values."""


class DimensionError(UsageError):
    """Shape mismatch between operands or between data and parameters."""


class DataError(RerankError):
    """Corrupt, missing or inconsistent input data."""

    exit_code = 3


class NumericError(RerankError):
    """NaN/Inf inputs or numerically degenerate states."""

    exit_code = 4

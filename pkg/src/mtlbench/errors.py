"""Exception types shared across the package."""


class MtlbenchError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(MtlbenchError):
    """Invalid configuration: bad dimensions, unknown keys, inconsistent settings."""


class DataFormatError(MtlbenchError):
    """Malformed input data (CSV schema violations, unparseable rows)."""


class DegenerateBatchError(MtlbenchError):
    """A batch too small for the requested operation (e.g. batchnorm on one row)."""


class NumericError(MtlbenchError):
    """Non-finite values encountered where finite numbers are required."""

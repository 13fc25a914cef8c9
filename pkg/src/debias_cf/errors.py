"""Exception types shared across the package.

The CLI maps these onto stable exit codes: ConfigError -> 1,
DataError -> 2, NumericalError -> 3.
"""


class DebiasCfError(Exception):
    """Base class for all package errors."""


class ConfigError(DebiasCfError, ValueError):
    """Invalid configuration or argument values."""


class DataError(DebiasCfError):
    """Malformed, corrupt, or inconsistent input data or artifact files."""


class NumericalError(DebiasCfError):
    """Non-finite values encountered during optimization."""

"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericalError -> 4.
"""


class NeuroxferError(Exception):
    """Base class for all package errors."""


class ConfigError(NeuroxferError):
    """Invalid configuration or arguments."""


class DataError(NeuroxferError):
    """Malformed, missing, or inconsistent data files."""


class NumericalError(NeuroxferError):
    """Numerical failure (non-finite values, divergence)."""

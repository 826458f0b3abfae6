"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4.
"""


class SyncError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(SyncError):
    """Invalid configuration, flags, or run parameters."""


class DataError(SyncError):
    """Corpus, trace, or dataset problems."""


class NumericError(SyncError):
    """Numerical failures: rank deficiency, divergence, undefined statistics."""

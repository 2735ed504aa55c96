"""Exception types shared across the package.

Plain ValueError is used for structural misuse (shape mismatches, empty
sets); the classes below mark conditions the CLI maps to distinct exit
codes.
"""


class PslabError(Exception):
    """Base class for package-level failures."""


class ConfigError(PslabError):
    """Bad configuration: unknown keys, invalid combinations (exit 1)."""


class DataError(PslabError):
    """Unloadable or inconsistent input data (exit 2)."""


class NumericalError(PslabError):
    """Numerical failure: rank deficiency, non-finite values (exit 3)."""

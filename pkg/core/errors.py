"""Exception types shared by every eqdiff module.

Each error carries the process exit code the CLI reports for it.
"""


class EqDiffError(Exception):
    """Base class for all eqdiff failures."""

    exit_code = 2


class ConfigError(EqDiffError):
    """Bad configuration or command-line usage."""

    exit_code = 1


class DimensionError(EqDiffError, ValueError):
    """Shapes or extents that do not fit together."""

    exit_code = 2


class DataError(EqDiffError):
    """Malformed, missing or empty input data."""

    exit_code = 2


class NumericError(EqDiffError, ArithmeticError):
    """A computation produced NaN or Inf."""

    exit_code = 3

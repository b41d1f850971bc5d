"""Exception hierarchy shared across the package.

Each class maps to a distinct CLI exit code (see cli.EXIT_CODES):
usage errors are argparse's own (exit 2), everything else derives
from WukongError.
"""


class WukongError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(WukongError):
    """Inconsistent shapes, widths, or invalid configuration values."""


class DataError(WukongError):
    """Malformed input rows, out-of-range ids, bad labels."""


class NumericError(WukongError):
    """NaN/Inf produced by a kernel op or optimizer step."""


class MetricError(DataError):
    """A metric is undefined for the given inputs (e.g. single-class AUC)."""

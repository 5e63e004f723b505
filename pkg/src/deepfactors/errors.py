"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: bad input files are a data error
(exit 2), degenerate cross-sections and non-finite numerics are a
numerical failure (exit 3).
"""


class DeepFactorsError(Exception):
    """Base class for all package-specific errors."""


class DataError(DeepFactorsError):
    """Malformed or inconsistent input files (schema, parse, alignment)."""


class DegenerateCrossSectionError(DeepFactorsError):
    """Too few eligible firms to sort a cross-section."""


class EmptyLegError(DeepFactorsError):
    """A long or short leg received no portfolio mass."""


class NumericalError(DeepFactorsError):
    """Non-finite loss, gradient, or a degenerate statistic."""


class WindowViolationError(DeepFactorsError):
    """A restricted dataset view was asked for a month outside its window."""

"""Exception types shared across the toolkit.

Everything derives from RadioBenchError so callers can catch broadly;
the CLI maps ConfigurationError-like failures to exit code 2 and
numeric/optimisation failures to exit code 3.
"""


class RadioBenchError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(RadioBenchError, ValueError):
    """A config value or combination of values is invalid."""


class DomainError(RadioBenchError, ValueError):
    """An input lies outside the mathematical domain of an operation."""


class DegenerateGeometryError(DomainError):
    """Geometry without a well-defined answer (coincident points, etc.)."""


class ShapeError(RadioBenchError, ValueError):
    """An array has the wrong shape or an inconsistent dimension."""


class NumericError(RadioBenchError, ArithmeticError):
    """A computation produced non-finite or otherwise unusable numbers."""


class OptimisationError(NumericError):
    """An optimiser failed to produce a finite result."""


class EstimationError(RadioBenchError, RuntimeError):
    """An estimator has no defensible answer for the given input."""


class DatasetFormatError(RadioBenchError, ValueError):
    """A dataset file is structurally valid but not a supported format/version."""


class CorruptDatasetError(RadioBenchError, IOError):
    """A dataset file fails magic/checksum/truncation checks."""

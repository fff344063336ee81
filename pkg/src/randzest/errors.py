"""Exception hierarchy.

Every error raised intentionally by this package derives from
:class:`RandzestError`, so callers (in particular the CLI) can separate
data/usage problems from numerical failures.
"""


class RandzestError(Exception):
    """Base class for all package errors."""


class DimensionError(RandzestError):
    """Array lengths or shapes are inconsistent."""


class DegenerateInputError(RandzestError):
    """Too few units for the requested moment (variance needs >= 2)."""


class EnumerationTooLargeError(RandzestError):
    """The number of assignments exceeds the enumeration cap."""


class DataError(RandzestError):
    """Malformed input data (CSV parsing, missing values, bad columns)."""


class SpecificationError(RandzestError):
    """An estimator or model was configured in an unsupported way."""


class DomainError(RandzestError):
    """A value fell outside the domain of the requested scale function."""


class NumericalError(RandzestError):
    """A linear-algebra or evaluation failure that is not recoverable."""


class ConvergenceError(RandzestError):
    """An operation required a converged fit but did not get one."""

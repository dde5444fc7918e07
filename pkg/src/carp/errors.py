"""Exception types shared across the package.

The CLI maps these onto exit codes: ``DataError`` -> 2, ``NumericError`` -> 3.
"""


class CarpError(Exception):
    """Base class for all package errors."""


class DimensionError(CarpError, ValueError):
    """Operand shapes are incompatible."""


class DegenerateInputError(CarpError, ValueError):
    """Input has no usable content (all-pad row, zero vector, empty text)."""


class NumericError(CarpError, ArithmeticError):
    """An operation produced NaN or Inf."""


class DataError(CarpError, ValueError):
    """A data file or record is malformed or inconsistent."""

"""Exception hierarchy shared by every module.

The CLI maps ``DataError`` to exit status 2 and ``NumericalError`` to 3.
"""


class SrcrError(Exception):
    """Base class for all errors raised by this package."""


class DataError(SrcrError, ValueError):
    """Invalid input data: bad shapes, out-of-range values, malformed files."""


class NumericalError(SrcrError, ArithmeticError):
    """A numerical routine could not produce a result."""


class NotPositiveDefiniteError(NumericalError):
    """Cholesky factorization hit a non-positive pivot."""

    def __init__(self, pivot: int, value: float):
        self.pivot = pivot
        self.value = value
        super().__init__(f"matrix is not positive definite: pivot {pivot} = {value!r}")

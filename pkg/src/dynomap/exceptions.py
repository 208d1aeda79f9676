"""Exception hierarchy.

Input problems derive from ``InputError`` (CLI exit code 2); numerical
failures derive from ``NumericalError`` (CLI exit code 3).
"""


class DynomapError(Exception):
    """Base class for all package errors."""

    def to_dict(self):
        out = {"error": type(self).__name__, "message": str(self)}
        out.update(getattr(self, "details", {}))
        return out


class InputError(DynomapError, ValueError):
    def __init__(self, message, **details):
        super().__init__(message)
        self.details = details


class MissingColumn(InputError):
    pass


class NonNumericValue(InputError):
    pass


class NonFiniteValue(InputError):
    pass


class DuplicateName(InputError):
    pass


class ShapeMismatch(InputError):
    pass


class FeatureMismatch(InputError):
    pass


class EmptyClass(InputError):
    pass


class NumericalError(DynomapError, ArithmeticError):
    def __init__(self, message, **details):
        super().__init__(message)
        self.details = details


class DegenerateVariance(NumericalError):
    pass


class NonFiniteGradient(NumericalError):
    pass

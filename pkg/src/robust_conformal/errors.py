"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    """An argument is outside the domain an operation accepts."""


class DegenerateError(ArithmeticError):
    """A numerical quantity collapsed (zero direction, missing derivative, ...)."""


class DegenerateDirectionError(DegenerateError):
    """A fitted shift direction is numerically zero."""


class SizeGuardError(ValueError):
    """An exhaustive routine was asked to run on too large an input."""

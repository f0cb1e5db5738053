"""Exception hierarchy shared across the package."""


class TrgsError(Exception):
    """Base class for all package errors."""


class InvalidArgument(TrgsError, ValueError):
    pass


class NumericFailure(TrgsError, ArithmeticError):
    pass


class UnsupportedOperation(TrgsError, NotImplementedError):
    pass


class DegenerateGradient(TrgsError, ValueError):
    """Raised when a step rule needs a nonzero gradient and gets zero."""


class DegenerateSubspace(TrgsError, ValueError):
    """Raised when the 2-D subspace metric is singular (gradient parallel to momentum)."""


class InvariantViolation(TrgsError, AssertionError):
    pass


class ConfigError(TrgsError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)

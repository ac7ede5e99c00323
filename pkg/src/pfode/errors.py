"""Exception types shared across the package."""


class PfodeError(Exception):
    """Base class for every error raised by pfode."""


class DomainError(PfodeError, ValueError):
    """An argument lies outside the domain of an operation (e.g. t > T)."""


class ShapeError(PfodeError, ValueError):
    """Array shapes are incompatible."""


class OrderingError(PfodeError, ValueError):
    """Times or grid indices are given in the wrong order."""


class ConfigError(PfodeError, ValueError):
    """A configuration value is missing, malformed or violates an invariant."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FormatError(PfodeError, ValueError):
    """A file does not follow the expected on-disk format."""


class NumericError(PfodeError, ArithmeticError):
    """Non-finite values or an ill-conditioned numeric step."""


class StateError(PfodeError, RuntimeError):
    """An operation was called in the wrong object state."""

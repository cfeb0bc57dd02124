"""Exception types shared across the package."""


class CrossCountError(Exception):
    """Base class for all package errors."""


class ConfigurationError(CrossCountError, ValueError):
    """A layer, block or network was configured with inconsistent shapes or names."""


class UsageError(CrossCountError, RuntimeError):
    """An API was called in the wrong order or with unusable arguments."""


class ParseError(CrossCountError, ValueError):
    """A text or binary file could not be parsed."""

    def __init__(self, message: str, path=None, line: int | None = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
        if line is not None:
            where = f"{where}:{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class NumericalError(CrossCountError, ArithmeticError):
    """Training or checking produced non-finite values."""

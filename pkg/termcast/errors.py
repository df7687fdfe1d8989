"""Exception hierarchy shared by the library and the CLI."""

from typing import Optional


class TermCastError(Exception):
    """Base class for all package errors."""

    exit_code = 2


class InvalidGridError(TermCastError, ValueError):
    pass


class MalformedTrajectoryError(TermCastError, ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class InvalidIntervalError(TermCastError, ValueError):
    pass


class EmptyInputError(TermCastError, ValueError):
    pass


class InvalidArgumentError(TermCastError, ValueError):
    pass


class ConfigError(TermCastError, ValueError):
    pass


class ShapeError(TermCastError, ValueError):
    pass


class FormatError(TermCastError, ValueError):
    pass


class ContractError(TermCastError):
    exit_code = 3


class NumericsError(TermCastError, ArithmeticError):
    exit_code = 3

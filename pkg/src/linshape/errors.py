"""Exception types shared across the package."""


class LinShapeError(Exception):
    """Base class for all package errors."""


class InvalidInputError(LinShapeError, ValueError):
    pass


class NumericError(LinShapeError, ArithmeticError):
    """A non-finite value appeared; ``where`` names the op or parameter."""

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where


class InvalidGraphError(LinShapeError, ValueError):
    pass


class StaleTapeError(LinShapeError, RuntimeError):
    pass


class ParseError(LinShapeError, ValueError):
    def __init__(self, message, line=None, path=None):
        loc = ""
        if path is not None:
            loc += f"{path}"
        if line is not None:
            loc += f":{line}"
        super().__init__(f"{loc}: {message}" if loc else message)
        self.line = line
        self.path = path


class FormatError(LinShapeError, ValueError):
    pass

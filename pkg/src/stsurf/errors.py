"""Exception types shared across the package."""


class InvalidInput(ValueError):
    """Input data violates a documented precondition."""


class ShapeError(InvalidInput):
    """Array shapes are incompatible for the requested operation."""


class SingularMatrix(ArithmeticError):
    """A linear system could not be solved even after regularization."""


class ConfigError(InvalidInput):
    """A configuration value is missing, unknown or inconsistent."""


class ParseError(InvalidInput):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)

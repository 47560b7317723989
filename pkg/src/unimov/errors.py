"""Exception types shared across the package."""


class UnimovError(Exception):
    pass


class ParameterError(UnimovError, ValueError):
    """An argument is outside the range an operation accepts."""


class SceneFormatError(UnimovError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class GeometryError(UnimovError, ValueError):
    pass


class GroupingError(UnimovError, ValueError):
    pass


class NumericError(UnimovError, ArithmeticError):
    pass


class ConfigError(UnimovError, ValueError):
    pass

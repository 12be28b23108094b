"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid levels, radii, intervals or config fields."""

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class SingularMatrix(ArithmeticError):
    pass


class SolverFailure(RuntimeError):
    def __init__(self, message, residual=None, where=None):
        super().__init__(message)
        self.residual = residual
        self.where = where


class FormatError(ValueError):
    """Corrupt or incompatible binary file."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset

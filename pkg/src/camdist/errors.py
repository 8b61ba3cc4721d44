"""Exception types shared across the package."""


class CamDistError(Exception):
    """Base class for all errors raised by camdist."""


class InvalidInputError(CamDistError, ValueError):
    pass


class DegenerateDepthError(CamDistError, ValueError):
    """A 3D point lies at or behind the camera's minimum depth."""


class DegenerateGeometryError(CamDistError, ValueError):
    pass


class NoConvergenceError(CamDistError, RuntimeError):
    pass


class NumericError(CamDistError, ArithmeticError):
    """Non-finite loss or gradient encountered during optimization."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        # last known-good parameters, if the caller had any
        self.checkpoint = checkpoint


class ConfigError(CamDistError, ValueError):
    pass


class FormatError(CamDistError, ValueError):
    """Malformed dataset or checkpoint file."""

    def __init__(self, message, line=None, field=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.line = line
        self.field = field


class VersionError(FormatError):
    pass

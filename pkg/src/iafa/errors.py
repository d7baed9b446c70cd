"""Exception hierarchy shared by every module."""


class IafaError(Exception):
    """Base class for all package errors."""


class DimensionError(IafaError, ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(IafaError, ValueError):
    """A configuration value is out of its valid domain."""


class StateError(IafaError, RuntimeError):
    """An object is not in the state an operation requires."""


class GeometryError(IafaError, ValueError):
    """Invalid geometric input, e.g. a point behind the camera."""


class InputError(IafaError, ValueError):
    """Malformed user-provided data."""


class ParseError(InputError):
    """A file could not be parsed; carries the offending line when known."""

    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        self.line = line
        self.source = source
        where = ""
        if source:
            where += f"{source}"
        if line is not None:
            where += f"{':' if source else 'line '}{line}"
        super().__init__(f"{where}: {message}" if where else message)


class GenerationError(IafaError, RuntimeError):
    """The synthetic scene generator could not satisfy its configuration."""


class DivergenceError(IafaError, FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, message: str = "non-finite loss"):
        self.step = step
        super().__init__(f"{message} at step {step}")

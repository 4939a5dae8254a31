"""Exception hierarchy shared by the library and the CLI."""


class LFMError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class ConfigError(LFMError, ValueError):
    exit_code = 2


class DataError(LFMError, ValueError):
    exit_code = 3


class NumericalError(LFMError, ArithmeticError):
    exit_code = 4


class SimulationError(NumericalError):
    pass


class ShapeError(LFMError, ValueError):
    exit_code = 4


class TraceError(LFMError, RuntimeError):
    """Raised when tensors from two different traces are combined."""

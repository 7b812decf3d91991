"""Exception hierarchy shared by every misskit module."""


class MisskitError(Exception):
    """Base class for all errors raised by misskit."""


class DimensionError(MisskitError, ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(MisskitError, ValueError):
    """A configuration value is invalid or unknown."""


class DataError(MisskitError, ValueError):
    """Input data violates a precondition (duplicate names, degenerate boxes, ...)."""


class ContractError(MisskitError, RuntimeError):
    """A caller broke an operation contract."""


class ProtocolError(MisskitError, RuntimeError):
    """The tracking protocol was violated, e.g. both modalities missing."""


class DivergenceError(MisskitError, FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, message, step=None, trace=None):
        super().__init__(message)
        self.step = step
        self.trace = trace or []

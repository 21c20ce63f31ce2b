"""Exception hierarchy shared by all gpvad modules.

Every error subclasses :class:`GpvadError`; most also subclass the closest
builtin so callers catching ``ValueError``/``OSError`` keep working.
"""


class GpvadError(Exception):
    """Base class for toolkit errors."""


class InvalidArgumentError(GpvadError, ValueError):
    pass


class DegenerateSignalError(GpvadError, ValueError):
    """A signal has zero energy where a non-zero RMS is required."""


class ConfigurationError(GpvadError, ValueError):
    pass


class NumericFailure(GpvadError, ArithmeticError):
    """Non-finite value in an activation, loss or gradient."""

    def __init__(self, message, where=None, model=None):
        super().__init__(message)
        self.where = where
        # last finite model, when the failure happened during training
        self.model = model


class StateError(GpvadError, RuntimeError):
    pass


class CheckpointFormatError(GpvadError, ValueError):
    pass


class UndefinedMetricError(GpvadError, ValueError):
    pass


class DegenerateBatchError(GpvadError, ValueError):
    pass


class ParseError(GpvadError, ValueError):
    def __init__(self, message, path=None, line=None):
        loc = ""
        if path is not None:
            loc = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(loc + message)
        self.path = path
        self.line = line

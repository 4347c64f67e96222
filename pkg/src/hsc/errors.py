"""Exception hierarchy shared by the engine and the command line."""


class HSCError(Exception):
    """Base class for every error raised by :mod:`hsc`."""


class DimensionError(HSCError, ValueError):
    """Tensor shapes do not line up (message names the offending axis)."""


class ParameterError(HSCError, ValueError):
    """A scalar argument or configuration value is out of its domain."""


class SpecError(ParameterError):
    """A network specification is internally inconsistent."""


class FormatError(HSCError, ValueError):
    """A binary file does not follow its declared layout.

    ``offset`` is the byte position at which parsing failed.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalError(HSCError, ArithmeticError):
    """NaN/Inf appeared during a computation."""

    def __init__(self, message, layer=None, iteration=None):
        super().__init__(message)
        self.layer = layer
        self.iteration = iteration


class ConvergenceError(HSCError, RuntimeError):
    """An iterative routine hit its iteration cap.

    ``last_value`` holds the final estimate (e.g. the Rayleigh quotient).
    """

    def __init__(self, message, last_value=None):
        super().__init__(message)
        self.last_value = last_value

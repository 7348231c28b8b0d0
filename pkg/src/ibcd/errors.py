class IBCDError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(IBCDError, ValueError):
    """Invalid parameters or missing inputs."""


class NumericalError(IBCDError, ArithmeticError):
    """A computation could not produce a finite, well-defined result."""


class WeakInstrumentError(NumericalError):
    def __init__(self, variable, r2=None, message=None):
        self.variable = variable
        self.r2 = r2
        if message is None:
            message = f"variable {variable} has no usable instrument"
            if r2 is not None:
                message += f" (first-stage R^2 = {r2:.3g})"
        super().__init__(message)


class ConvergenceError(NumericalError):
    pass


class DataIOError(IBCDError, OSError):
    """Missing, unreadable or malformed files."""

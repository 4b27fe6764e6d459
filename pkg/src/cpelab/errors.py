"""Exception types shared across the package."""


class CpeError(Exception):
    """Base class for all package errors."""


class InvalidInputError(CpeError, ValueError):
    pass


class InvalidStateError(CpeError, RuntimeError):
    pass


class ConvergenceError(CpeError, RuntimeError):
    def __init__(self, message, estimate):
        super().__init__(f"{message} (last estimate {estimate!r})")
        self.estimate = estimate


class UnsupportedOpError(CpeError, NotImplementedError):
    pass


class NumericFailure(CpeError, FloatingPointError):
    """A loss became non-finite during training."""

    def __init__(self, message, stage=None, iteration=None):
        super().__init__(f"{message} (stage={stage}, iteration={iteration})")
        self.stage = stage
        self.iteration = iteration


class GenerationError(CpeError, RuntimeError):
    pass


class ConfigError(CpeError, ValueError):
    pass

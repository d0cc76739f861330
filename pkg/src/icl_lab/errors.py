"""Exception types shared across the package."""


class IclLabError(Exception):
    """Base class for all package errors."""


class DegenerateInput(IclLabError):
    """Input violates a numerical-rank or shape precondition."""


class DimensionMismatch(IclLabError):
    """Operands have incompatible dimensions."""


class NoConvergence(IclLabError):
    """An iterative routine failed to reach its tolerance."""


class PreconditionViolated(IclLabError):
    """A documented operation precondition does not hold."""


class OutOfRange(IclLabError):
    """Parameters fall outside the validity range of a bound."""


class NonFiniteLoss(IclLabError):
    """Training produced a non-finite loss or gradient.

    Carries the trace accumulated up to the failing iteration so partial
    results can still be inspected or written out.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class ParseError(IclLabError):
    """A config file could not be parsed."""


class ValidationError(IclLabError):
    """A config value violates its constraint; names the offending key."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key

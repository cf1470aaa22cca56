"""Exception types shared across the package."""


class EstimationError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatch(EstimationError, ValueError):
    """An argument has the wrong shape, length, or index range."""


class NumericalFailure(EstimationError, RuntimeError):
    """A numeric evaluation produced non-finite values or a factorization failed."""


class DomainError(EstimationError, ValueError):
    """A model was evaluated outside its physical domain."""

"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A config object or argument violates its invariants."""


class DataError(ValueError):
    """A dataset is missing something the operation requires (labels, classes...)."""


class ShapeError(ValueError):
    """Tensor/vector shapes are incompatible."""


class PreconditionError(ValueError):
    """An input violates an operation precondition (e.g. batch too small)."""


class StateError(RuntimeError):
    """A model is in the wrong state for the operation (e.g. head not aligned)."""


class UnsupportedModelError(ValueError):
    """The model lacks structure the operation needs (e.g. no BatchNorm layers)."""


class FormatError(ValueError):
    """An on-disk artifact is malformed or fails its integrity checks."""


class DomainError(ValueError):
    """A numeric argument is outside the mathematical domain of the function."""


class PrecisionError(ValueError):
    """Not enough data for the requested estimate."""


class DivergenceError(RuntimeError):
    """Optimization produced a non-finite loss; carries the failing iteration."""

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration

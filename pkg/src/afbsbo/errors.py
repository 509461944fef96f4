"""Exception types raised across the package."""


class InvalidSpecError(ValueError):
    """A workload structure spec cannot produce a valid workload."""


class InvalidBoundsError(ValueError):
    """Latent bounds are empty or place the skip threshold above zero."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class DomainError(ValueError):
    """A latent coordinate lies outside [0, 1]."""


class ShapeError(ValueError):
    """Array shapes do not agree."""


class DegenerateReferenceError(ValueError):
    """The dense reference output has zero L1 mass."""


class NumericFailureError(RuntimeError):
    """Kernel matrix factorization failed even after jitter escalation."""


class UndefinedCorrelationError(ValueError):
    """Rank correlation of a constant vector."""

"""One-dimensional latent parameterization of the sparse-attention knobs.

A single coordinate ``s`` in [0, 1] moves all three knobs together:
``s = 0`` is the conservative corner (keep every block, strict coherence
gate, skip nothing) and ``s = 1`` the aggressive one.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

from .errors import DomainError, InvalidBoundsError


@dataclass(frozen=True)
class SparseParams:
    """Knob values handed to the sparse-attention simulator.

    Attributes
    ----------
    tau_keep : float
        Pooled attention mass each query block must retain (top-CDF rule).
    theta : float
        Cosine self-similarity a block needs before it may be pruned.
    lam : float
        Log-space skip threshold, always <= 0.
    """

    tau_keep: float
    theta: float
    lam: float


@dataclass(frozen=True)
class LatentBounds:
    tau_min: float = 0.9
    tau_max: float = 1.0
    theta_min: float = 0.0
    theta_max: float = 0.376
    lambda_min: float = -42.0
    lambda_max: float = 0.0

    def as_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return validate_bounds(cls(**{k: float(d[k]) for k in cls.__dataclass_fields__}))

    def contains(self, params: SparseParams, tol: float = 1e-12) -> bool:
        return (
            self.tau_min - tol <= params.tau_keep <= self.tau_max + tol
            and self.theta_min - tol <= params.theta <= self.theta_max + tol
            and self.lambda_min - tol <= params.lam <= self.lambda_max + tol
        )


DEFAULT_BOUNDS = LatentBounds()


def validate_bounds(bounds: LatentBounds) -> LatentBounds:
    """Return ``bounds`` unchanged or raise naming the offending field."""
    for name in ("tau", "theta", "lambda"):
        lo = getattr(bounds, f"{name}_min")
        hi = getattr(bounds, f"{name}_max")
        if not lo < hi:
            raise InvalidBoundsError(f"{name}_min", f"must be < {name}_max (got {lo} >= {hi})")
    if bounds.lambda_max > 0:
        raise InvalidBoundsError("lambda_max", f"must be <= 0 (got {bounds.lambda_max})")
    if not (0.0 <= bounds.tau_min and bounds.tau_max <= 1.0):
        raise InvalidBoundsError("tau_min", "keep mass must lie in [0, 1]")
    if bounds.theta_min < -1.0:
        raise InvalidBoundsError("theta_min", "cosine threshold must be >= -1")
    return bounds


def map_s_to_params(s: float, bounds: LatentBounds = DEFAULT_BOUNDS) -> SparseParams:
    """Map a latent coordinate to (tau_keep, theta, lambda).

    Keep mass and coherence threshold fall linearly with ``s``; the skip
    threshold rises linearly towards ``lambda_max``. Every direction makes
    block sparsity non-decreasing in ``s``.
    """
    s = float(s)
    if not 0.0 <= s <= 1.0:
        raise DomainError(f"latent s must lie in [0, 1], got {s}")
    b = bounds
    return SparseParams(
        tau_keep=b.tau_max - s * (b.tau_max - b.tau_min),
        theta=b.theta_max - s * (b.theta_max - b.theta_min),
        lam=b.lambda_min + s * (b.lambda_max - b.lambda_min),
    )

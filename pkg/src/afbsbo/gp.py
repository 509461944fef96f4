"""One-dimensional Gaussian-process surrogate for the error landscape.

Zero-mean, unit-amplitude prior on standardized targets with a Matern 5/2
kernel of fixed length scale; Expected Improvement for proposals and an
upper-confidence-bound scan for probably-feasible latent intervals.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular
from scipy.special import ndtr

from .errors import NumericFailureError

LATENT_GRID = np.linspace(0.0, 1.0, 1001)
DEFAULT_LENGTH_SCALE = 0.2
DEFAULT_NOISE = 1e-6
JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)
_SQRT5 = np.sqrt(5.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def matern52(s, s_prime, length_scale: float = DEFAULT_LENGTH_SCALE):
    """Matern 5/2 correlation; broadcasts over array inputs."""
    if length_scale <= 0:
        raise ValueError("length scale must be positive")
    r = np.abs(np.asarray(s, dtype=float) - np.asarray(s_prime, dtype=float)) / length_scale
    out = (1.0 + _SQRT5 * r + 5.0 * r * r / 3.0) * np.exp(-_SQRT5 * r)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class GPModel:
    """A fitted GP. Immutable; refit with the full data set to update."""

    s: np.ndarray
    y: np.ndarray
    noise: np.ndarray
    length_scale: float
    y_mean: float
    y_std: float
    chol: np.ndarray
    alpha: np.ndarray
    jitter: float = 0.0

    @property
    def n(self) -> int:
        return len(self.s)

    @property
    def observations(self) -> List[Tuple[float, float]]:
        return list(zip(self.s.tolist(), self.y.tolist()))


@dataclass(frozen=True)
class Region:
    s_low: float
    s_high: float

    def __post_init__(self):
        if not 0.0 <= self.s_low < self.s_high <= 1.0:
            raise ValueError(f"invalid region [{self.s_low}, {self.s_high}]")

    @property
    def width(self) -> float:
        return self.s_high - self.s_low


def gp_fit(
    observations: Sequence[Tuple[float, float]],
    length_scale: float = DEFAULT_LENGTH_SCALE,
    noise=DEFAULT_NOISE,
) -> GPModel:
    """Fit the GP to ``(s, y)`` pairs.

    ``noise`` is a variance on the standardized scale, either a scalar or one
    value per observation (warm-start pseudo-observations use a larger one).
    """
    if len(observations) < 1:
        raise ValueError("need at least one observation")
    s = np.array([o[0] for o in observations], dtype=float)
    y = np.array([o[1] for o in observations], dtype=float)
    noise = np.broadcast_to(np.asarray(noise, dtype=float), s.shape).copy()
    y_mean = float(y.mean())
    y_std = max(float(y.std()), 1e-12)
    z = (y - y_mean) / y_std
    K = matern52(s[:, None], s[None, :], length_scale) + np.diag(noise)
    for jitter in JITTERS:
        try:
            L = cholesky(K + jitter * np.eye(len(s)), lower=True)
            break
        except LinAlgError:
            continue
    else:
        raise NumericFailureError("kernel matrix not positive definite after jitter 1e-6")
    alpha = cho_solve((L, True), z)
    return GPModel(s, y, noise, float(length_scale), y_mean, y_std, L, alpha, jitter)


def gp_posterior(model: GPModel, s) -> Tuple[np.ndarray, np.ndarray]:
    """Posterior mean and variance in the original (de-standardized) units."""
    s_arr = np.atleast_1d(np.asarray(s, dtype=float))
    k_star = matern52(s_arr[:, None], model.s[None, :], model.length_scale)
    mu = k_star @ model.alpha
    v = solve_triangular(model.chol, k_star.T, lower=True)
    var = np.maximum(1.0 - np.einsum("ij,ij->j", v, v), 0.0)
    mu = model.y_mean + model.y_std * mu
    var = var * model.y_std ** 2
    if np.ndim(s) == 0:
        return float(mu[0]), float(var[0])
    return mu, var


def expected_improvement(mu, sigma, f_best):
    """EI for minimization; the sigma = 0 limit is max(f_best - mu, 0)."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma < 0):
        raise ValueError("sigma must be non-negative")
    improve = f_best - mu
    safe = np.where(sigma > 0, sigma, 1.0)
    with np.errstate(over="ignore"):  # tiny sigma: z * z -> inf, exp -> 0
        z = improve / safe
        ei = improve * ndtr(z) + sigma * _INV_SQRT_2PI * np.exp(-0.5 * z * z)
    ei = np.where(sigma > 0, ei, np.maximum(improve, 0.0))
    ei = np.maximum(ei, 0.0)
    return float(ei) if ei.ndim == 0 else ei


def argmax_last(values: np.ndarray) -> int:
    """Index of the maximum, ties resolved towards the highest index."""
    values = np.asarray(values)
    return int(np.flatnonzero(values == values.max())[-1])


def propose_next(model: GPModel, f_best: Optional[float] = None, grid: np.ndarray = LATENT_GRID) -> float:
    """Grid argmax of EI; ties go to larger s."""
    if f_best is None:
        f_best = float(model.y.min())
    mu, var = gp_posterior(model, grid)
    return float(grid[argmax_last(expected_improvement(mu, np.sqrt(var), f_best))])


def _runs(mask: np.ndarray) -> List[Tuple[int, int]]:
    """Inclusive (start, end) index pairs of True runs."""
    padded = np.concatenate([[False], mask, [False]])
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    return [(int(a), int(b) - 1) for a, b in zip(edges[::2], edges[1::2])]


def extract_low_ucb_regions(
    model: GPModel,
    eps_high: float,
    beta: float = 1.0,
    max_regions: int = 3,
    grid: np.ndarray = LATENT_GRID,
) -> List[Region]:
    """Maximal latent intervals where mu + beta * sigma stays <= eps_high.

    Runs separated by a single grid point are merged. Regions come back
    ordered by upper endpoint, highest first. When nothing qualifies a
    single region of half-width 0.1 around the posterior-mean minimum is
    returned.
    """
    if beta < 0:
        raise ValueError("beta must be >= 0")
    mu, var = gp_posterior(model, grid)
    ok = mu + beta * np.sqrt(var) <= eps_high
    runs = _runs(ok)
    merged: List[List[int]] = []
    for a, b in runs:
        if merged and a - merged[-1][1] == 2:
            merged[-1][1] = b
        else:
            merged.append([a, b])
    step = grid[1] - grid[0]
    regions = []
    for a, b in merged:
        lo, hi = float(grid[a]), float(grid[b])
        if hi <= lo:  # single grid point
            lo, hi = max(0.0, lo - step), min(1.0, hi + step)
        regions.append(Region(lo, hi))
    if not regions:
        centre = float(grid[int(np.argmin(mu))])
        return [Region(max(0.0, centre - 0.1), min(1.0, centre + 0.1))]
    regions.sort(key=lambda r: r.s_high, reverse=True)
    return regions[:max_regions]

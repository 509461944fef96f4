"""Three-stage hyperparameter search over the latent sparsity coordinate.

Stage 1 screens the latent axis with Bayesian optimization on cheap
low-fidelity (short sequence) evaluations. Stage 2 bisects the most
promising intervals with high-fidelity evaluations, keeping the sparsest
point whose error lands inside the target band. Stage 3 re-checks the winner
on held-out inputs and backs off by 10% in latent space if any of them
breaks the upper error bound.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .attn_sim import EvalOutcome, LatentEvaluator, PreparedInput, Shift, Workload
from .gp import (
    LATENT_GRID,
    GPModel,
    Region,
    extract_low_ucb_regions,
    gp_fit,
    propose_next,
)
from .latent import DEFAULT_BOUNDS, LatentBounds, SparseParams, map_s_to_params

log = logging.getLogger(__name__)

Observation = Tuple[float, float]


@dataclass(frozen=True)
class ErrorBand:
    eps_low: float = 0.045
    eps_high: float = 0.055

    def __post_init__(self):
        if not 0.0 <= self.eps_low < self.eps_high:
            raise ValueError(f"need 0 <= eps_low < eps_high, got [{self.eps_low}, {self.eps_high}]")

    def contains(self, error: float) -> bool:
        return self.eps_low <= error <= self.eps_high


@dataclass(frozen=True)
class TuneBudget:
    """Evaluation budget and surrogate settings for one head."""

    init_points: Tuple[float, ...] = (0.2, 0.5, 0.8)
    bo_iterations: int = 12
    warm_bo_iterations: int = 8
    regions: int = 2
    binary_iterations: int = 4
    warm_binary_iterations: int = 3
    drift_binary_iterations: int = 2
    validation_inputs: int = 5
    ucb_beta: float = 1.0
    length_scale: float = 0.2
    noise: float = 1e-6
    warm_noise_factor: float = 10.0
    fallback_factor: float = 0.9

    @property
    def cold_evals(self) -> Tuple[int, int]:
        n_low = len(self.init_points) + self.bo_iterations
        return n_low, self.regions * self.binary_iterations + self.validation_inputs

    @property
    def warm_evals(self) -> Tuple[int, int]:
        return self.warm_bo_iterations, self.regions * self.warm_binary_iterations + self.validation_inputs


@dataclass
class TuneResult:
    layer: int
    head: int
    s_best: float
    params: SparseParams
    error: float
    sparsity: float
    fallback_applied: bool = False
    band_miss: bool = False
    evals_low: int = 0
    evals_high: int = 0
    validation_errors: List[float] = field(default_factory=list)
    regret_trace: List[float] = field(default_factory=list)
    observations: List[Observation] = field(default_factory=list)
    # everything the Stage-1 posterior was fit on; seeds the next head's GP
    transfer: List[Observation] = field(default_factory=list)
    mode: str = "cold"
    pre_fallback_s: Optional[float] = None
    # Stage-2 winner's error on the tuning input (nan on a band-miss)
    candidate_error: float = float("nan")


@dataclass
class Stage1Result:
    model: GPModel
    regions: List[Region]
    observations: List[Observation]
    regret_trace: List[float]


@dataclass
class Stage2Result:
    s_best: float
    sparsity: float
    error: float
    band_miss: bool
    trace: List[Tuple[float, float, float]] = field(default_factory=list)
    # final (s_low, s_high) bracket of each pass
    brackets: List[Tuple[float, float]] = field(default_factory=list)


@dataclass
class Stage3Result:
    s: float
    validation_errors: List[float]
    validation_sparsity: List[float]
    fallback_applied: bool
    pre_fallback_s: float
    worst_index: Optional[int] = None
    fallback_error: Optional[float] = None
    fallback_sparsity: Optional[float] = None


def _outcome(result) -> Tuple[float, float]:
    """Normalize an evaluator return value to (error, sparsity)."""
    if isinstance(result, EvalOutcome):
        return result.error, result.sparsity
    if isinstance(result, tuple):
        return float(result[0]), float(result[1])
    return float(result), float("nan")


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------


def stage1_explore(
    evaluate_low: Callable,
    band: ErrorBand,
    budget: TuneBudget = TuneBudget(),
    warm_start: Optional[Sequence[Observation]] = None,
    n_iterations: Optional[int] = None,
) -> Stage1Result:
    """Low-fidelity Bayesian optimization of the error landscape.

    Cold: the fixed initial points, then ``bo_iterations`` EI proposals.
    Warm: ``warm_start`` pairs enter the GP as pseudo-observations with
    inflated noise and ``warm_bo_iterations`` proposals follow, with no
    initial points.
    """
    fresh: List[Observation] = []
    trace: List[float] = []
    pseudo = list(warm_start or [])

    def fit() -> GPModel:
        obs = pseudo + fresh
        noise = [budget.noise * budget.warm_noise_factor] * len(pseudo) + [budget.noise] * len(fresh)
        return gp_fit(obs, budget.length_scale, np.array(noise))

    def record(s: float) -> None:
        e, _ = _outcome(evaluate_low(s))
        fresh.append((s, e))
        trace.append(min(trace[-1], e) if trace else e)

    if pseudo:
        iterations = budget.warm_bo_iterations if n_iterations is None else n_iterations
    else:
        iterations = budget.bo_iterations if n_iterations is None else n_iterations
        for s in budget.init_points:
            record(float(s))
    for _ in range(iterations):
        model = fit()
        record(propose_next(model, float(model.y.min())))
    model = fit()
    regions = extract_low_ucb_regions(model, band.eps_high, budget.ucb_beta)
    return Stage1Result(model, regions, fresh, trace)


def stage2_refine(
    evaluate_high: Callable,
    regions: Sequence[Region],
    band: ErrorBand,
    iterations: int = 4,
    n_regions: int = 2,
) -> Stage2Result:
    """High-fidelity bisection, ``iterations`` midpoints per pass.

    Pass k bisects ``regions[k]``. When Stage 1 produced fewer than
    ``n_regions`` regions the remaining passes continue inside the bracket
    left by the previous pass, so the budget buys precision instead of
    being dropped.
    """
    if not regions:
        raise ValueError("stage 2 needs at least one region")
    if iterations < 1:
        raise ValueError("need at least one bisection")
    best_s, best_sp, best_err, best_key = 0.0, 0.0, float("nan"), 0.0
    trace, brackets = [], []
    s_l, s_h = regions[0].s_low, regions[0].s_high
    for k in range(n_regions):
        if k < len(regions):
            s_l, s_h = regions[k].s_low, regions[k].s_high
        for _ in range(iterations):
            s_mid = 0.5 * (s_l + s_h)
            e, sp = _outcome(evaluate_high(s_mid))
            trace.append((s_mid, e, sp))
            if e <= band.eps_high:
                # sparsity is non-decreasing in s, so s ranks bare-error evaluators
                key = s_mid if np.isnan(sp) else sp
                if e >= band.eps_low and key > best_key:
                    best_s, best_sp, best_err, best_key = s_mid, sp, e, key
                s_l = s_mid
            else:
                s_h = s_mid
        brackets.append((s_l, s_h))
    if best_key <= 0:
        return Stage2Result(regions[0].s_low, float("nan"), float("nan"), True, trace, brackets)
    return Stage2Result(best_s, best_sp, best_err, False, trace, brackets)


def stage3_validate(
    validators: Sequence[Callable],
    s_best: float,
    band: ErrorBand,
    n_inputs: int = 5,
    fallback_factor: float = 0.9,
) -> Stage3Result:
    """Worst-case check on ``n_inputs`` held-out inputs with one fallback."""
    if len(validators) < n_inputs:
        raise ValueError(f"stage 3 needs {n_inputs} validation inputs, got {len(validators)}")
    outcomes = [_outcome(v(s_best)) for v in validators[:n_inputs]]
    errors = [e for e, _ in outcomes]
    sparsity = [sp for _, sp in outcomes]
    worst = int(np.argmax(errors))
    if errors[worst] <= band.eps_high:
        return Stage3Result(s_best, errors, sparsity, False, s_best)
    s_new = fallback_factor * s_best
    e, sp = _outcome(validators[worst](s_new))
    return Stage3Result(s_new, errors, sparsity, True, s_best, worst, e, sp)


# --------------------------------------------------------------------------
# per-head and per-model drivers
# --------------------------------------------------------------------------


@dataclass
class HeadInputs:
    """Evaluators bound to one (layer, head)."""

    low: LatentEvaluator
    high: LatentEvaluator
    validation: List[LatentEvaluator]


def head_inputs(
    workload: Workload,
    layer: int,
    head: int,
    bounds: LatentBounds = DEFAULT_BOUNDS,
    n_validation: int = 5,
    draw_base: int = 0,
    shift: Optional[Shift] = None,
    ledger=None,
) -> HeadInputs:
    def bind(fid, draw, stage):
        Q, K, V = workload.draw(layer, head, fid, draw, shift)
        hook = None
        if ledger is not None:
            hook = lambda fidelity: ledger.record_eval(layer, head, stage, fidelity)
        return LatentEvaluator(PreparedInput(Q, K, V, workload.grid(fid)), bounds, fid, hook)

    low = bind("low", draw_base, "stage1")
    high = bind("high", draw_base, "stage2")
    validation = [bind("high", draw_base + k, "stage3") for k in range(1, n_validation + 1)]
    return HeadInputs(low, high, validation)


def tune_head(
    workload: Workload,
    layer: int,
    head: int,
    band: ErrorBand = ErrorBand(),
    bounds: LatentBounds = DEFAULT_BOUNDS,
    budget: TuneBudget = TuneBudget(),
    warm_start: Optional[Sequence[Observation]] = None,
    ledger=None,
    binary_iterations: Optional[int] = None,
    bo_iterations: Optional[int] = None,
    shift: Optional[Shift] = None,
    draw_base: int = 0,
    mode: Optional[str] = None,
    inputs: Optional[HeadInputs] = None,
) -> TuneResult:
    """Run all three stages for one head."""
    warm = bool(warm_start)
    mode = mode or ("warm" if warm else "cold")
    if binary_iterations is None:
        binary_iterations = budget.warm_binary_iterations if warm else budget.binary_iterations
    if ledger is not None:
        ledger.begin_head(layer, head, mode)
    if inputs is None:
        inputs = head_inputs(workload, layer, head, bounds, budget.validation_inputs, draw_base, shift, ledger)

    st1 = stage1_explore(inputs.low, band, budget, warm_start, bo_iterations)
    st2 = stage2_refine(inputs.high, st1.regions, band, binary_iterations, budget.regions)
    s_candidate = 0.0 if st2.band_miss else st2.s_best
    st3 = stage3_validate(inputs.validation, s_candidate, band, budget.validation_inputs, budget.fallback_factor)

    if st3.fallback_applied:
        # sparsity stays a tuning-input quantity so it is comparable across heads;
        # counting the mask costs no attention evaluation
        error = st3.fallback_error
        sparsity = inputs.high.prepared.sparsity(map_s_to_params(st3.s, bounds))
    elif st2.band_miss:
        error, sparsity = max(st3.validation_errors), st3.validation_sparsity[0]
    else:
        error, sparsity = st2.error, st2.sparsity
    evals_low = inputs.low.calls
    evals_high = inputs.high.calls + sum(v.calls for v in inputs.validation)
    if st2.band_miss:
        log.info("head (%d, %d): no bisection midpoint landed in the band; using dense config", layer, head)
    return TuneResult(
        layer=layer,
        head=head,
        s_best=st3.s,
        params=map_s_to_params(st3.s, bounds),
        error=float(error),
        sparsity=float(sparsity),
        fallback_applied=st3.fallback_applied,
        band_miss=st2.band_miss,
        evals_low=evals_low,
        evals_high=evals_high,
        validation_errors=list(st3.validation_errors),
        regret_trace=list(st1.regret_trace),
        observations=list(st1.observations),
        transfer=list(st1.model.observations),
        mode=mode,
        pre_fallback_s=st3.pre_fallback_s,
        candidate_error=float(st2.error),
    )


def tune_model(
    workload: Workload,
    band: ErrorBand = ErrorBand(),
    bounds: LatentBounds = DEFAULT_BOUNDS,
    budget: TuneBudget = TuneBudget(),
    per_layer: bool = False,
    ledger=None,
    warm: bool = True,
) -> List[TuneResult]:
    """Tune every head, the first cold and each later one warm-started.

    A warm head's GP is seeded with all data the previous head's posterior
    was fit on, so information accumulates along the chain.

    With ``per_layer`` only head 0 of each layer is tuned and its result is
    broadcast to the layer's other heads.
    """
    results: List[TuneResult] = []
    previous: Optional[TuneResult] = None
    spec = workload.spec
    for layer in range(spec.layers):
        heads = [0] if per_layer else range(spec.heads)
        for head in heads:
            ws = previous.transfer if (warm and previous is not None) else None
            res = tune_head(workload, layer, head, band, bounds, budget, warm_start=ws, ledger=ledger)
            results.append(res)
            previous = res
            if per_layer:
                for other in range(1, spec.heads):
                    results.append(replace(res, head=other, evals_low=0, evals_high=0, mode="broadcast"))
    results.sort(key=lambda r: (r.layer, r.head))
    return results


# --------------------------------------------------------------------------
# baselines and brute-force reference
# --------------------------------------------------------------------------


def _accept_max_sparsity(samples, band: ErrorBand, bounds, mode, layer=-1, head=-1, respect_low=False) -> TuneResult:
    feasible = [
        (s, e, sp) for s, e, sp in samples
        if e <= band.eps_high and (not respect_low or e >= band.eps_low)
    ]
    n = len(samples)
    if not feasible:
        return TuneResult(layer, head, 0.0, map_s_to_params(0.0, bounds), float("nan"), 0.0,
                          band_miss=True, evals_high=n, mode=mode)
    # highest sparsity, then smallest s; s stands in when sparsity is unknown
    s, e, sp = max(feasible, key=lambda c: (c[0] if np.isnan(c[2]) else c[2], -c[0]))
    return TuneResult(layer, head, s, map_s_to_params(s, bounds), e, sp, evals_high=n, mode=mode)


def grid_search_baseline(
    evaluate_high: Callable,
    band: ErrorBand = ErrorBand(),
    grid_size: int = 40,
    bounds: LatentBounds = DEFAULT_BOUNDS,
) -> TuneResult:
    """Exhaustive high-fidelity sweep of a uniform latent grid."""
    if grid_size < 2:
        raise ValueError("grid size must be >= 2")
    samples = []
    for s in np.linspace(0.0, 1.0, grid_size):
        e, sp = _outcome(evaluate_high(float(s)))
        samples.append((float(s), e, sp))
    return _accept_max_sparsity(samples, band, bounds, "grid")


def random_search_baseline(
    evaluate_high: Callable,
    band: ErrorBand = ErrorBand(),
    budget: int = 50,
    seed: int = 0,
    bounds: LatentBounds = DEFAULT_BOUNDS,
) -> TuneResult:
    """I.i.d. uniform latent samples, same acceptance rule as the grid."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    rng = np.random.default_rng(seed)
    samples = []
    for s in rng.uniform(0.0, 1.0, size=budget):
        e, sp = _outcome(evaluate_high(float(s)))
        samples.append((float(s), e, sp))
    return _accept_max_sparsity(samples, band, bounds, "random")


def bo_only_baseline(
    evaluate_low: Callable,
    evaluate_high: Callable,
    band: ErrorBand = ErrorBand(),
    budget: TuneBudget = TuneBudget(),
    bounds: LatentBounds = DEFAULT_BOUNDS,
) -> TuneResult:
    """Stage 1 alone: take the largest screened s that looked feasible.

    One high-fidelity evaluation measures its sparsity; if it breaks the
    bound there the dense configuration is returned.
    """
    st1 = stage1_explore(evaluate_low, band, budget)
    feasible = [s for s, e in st1.observations if e <= band.eps_high]
    n_low = len(st1.observations)
    if not feasible:
        return TuneResult(-1, -1, 0.0, map_s_to_params(0.0, bounds), float("nan"), 0.0, band_miss=True,
                          evals_low=n_low, mode="bo")
    s = max(feasible)
    e, sp = _outcome(evaluate_high(s))
    if e > band.eps_high:
        return TuneResult(-1, -1, 0.0, map_s_to_params(0.0, bounds), e, 0.0, band_miss=True,
                          evals_low=n_low, evals_high=1, mode="bo")
    return TuneResult(-1, -1, s, map_s_to_params(s, bounds), e, sp, evals_low=n_low, evals_high=1, mode="bo",
                      observations=st1.observations)


def constrained_optimum(
    evaluate_high: Callable,
    band: ErrorBand = ErrorBand(),
    grid: np.ndarray = LATENT_GRID,
) -> Tuple[float, float, float]:
    """Brute-force (s, sparsity, error) maximizing sparsity with error in band.

    Returns ``(0.0, 0.0, nan)`` when no grid point lands in the band.
    """
    best = (0.0, 0.0, float("nan"))
    for s in grid:
        e, sp = _outcome(evaluate_high(float(s)))
        if band.contains(e) and sp > best[1]:
            best = (float(s), sp, e)
    return best

"""Runtime drift monitoring and reduced-budget re-calibration."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

from .attn_sim import Shift, Workload, evaluate_params
from .cache import CacheEntry, ConfigCache
from .optimizer import ErrorBand, TuneBudget, TuneResult, tune_head

# draw indices: stream batches and retune inputs never reuse the tuning draws 0..5
BATCH_DRAW_BASE = 10_000
RETUNE_DRAW_BASE = 1_000_000


@dataclass
class DriftMonitorState:
    """Sliding window of per-batch worst-case errors.

    Fires when at least ``min_violations`` of the last ``window`` batches
    exceed ``eps_high``.
    """

    eps_high: float = 0.055
    window: int = 100
    min_violations: int = 50
    bo_iterations: int = 8
    binary_iterations: int = 2
    errors: deque = field(default_factory=deque)
    triggered: bool = False

    def __post_init__(self):
        if not 1 <= self.min_violations <= self.window:
            raise ValueError("need 1 <= min_violations <= window")
        self.errors = deque(self.errors, maxlen=self.window)

    @property
    def violations(self) -> int:
        return sum(e > self.eps_high for e in self.errors)

    def update(self, worst_error: float) -> bool:
        self.errors.append(float(worst_error))
        self.triggered = self.violations >= self.min_violations
        return self.triggered

    def reset(self) -> None:
        self.errors.clear()
        self.triggered = False


@dataclass
class BatchRecord:
    batch: int
    layer: int
    head: int
    error: float
    sparsity: float
    shifted: bool
    triggered: bool
    retuned: bool = False


@dataclass
class DriftLog:
    records: List[BatchRecord]
    retunes: List[Tuple[int, TuneResult]]
    cache: ConfigCache

    @property
    def triggered(self) -> bool:
        return bool(self.retunes)

    def first_trigger(self) -> Optional[int]:
        return min((b for b, _ in self.retunes), default=None)


def batch_error(workload: Workload, layer: int, head: int, params, draw: int, shift: Optional[Shift]):
    """(error, sparsity) of fixed params on one fresh high-fidelity draw."""
    Q, K, V = workload.draw(layer, head, "high", draw, shift)
    return evaluate_params(Q, K, V, params, workload.grid("high"))


def run_drift(
    workload: Workload,
    cache: ConfigCache,
    n_batches: int,
    shift: Optional[Shift] = None,
    shift_at: Optional[int] = None,
    budget: TuneBudget = TuneBudget(),
    window: int = 100,
    min_violations: int = 50,
    ledger=None,
) -> DriftLog:
    """Stream ``n_batches`` fresh inputs through the cached configuration.

    From batch ``shift_at`` on, inputs come from the shifted structure. Each
    head has its own monitor; when it fires the head is re-tuned on
    post-shift inputs with the drift budget, warm-started from its cached
    (s, error), and its monitor restarts.
    """
    if n_batches < 1:
        raise ValueError("need at least one batch")
    band = cache.band
    entries: Dict[tuple, CacheEntry] = cache.entry_map()
    monitors = {
        key: DriftMonitorState(band.eps_high, window, min_violations, budget.warm_bo_iterations,
                               budget.drift_binary_iterations)
        for key in entries
    }
    records, retunes = [], []
    for b in range(n_batches):
        active = shift if (shift is not None and shift_at is not None and b >= shift_at) else None
        for key in sorted(entries):
            layer, head = key
            entry = entries[key]
            err, sp = batch_error(workload, layer, head, entry.params, BATCH_DRAW_BASE + b, active)
            mon = monitors[key]
            fired = mon.update(err)
            rec = BatchRecord(b, layer, head, err, sp, active is not None, fired)
            records.append(rec)
            if fired:
                res = tune_head(
                    workload, layer, head, band, cache.bounds, budget,
                    warm_start=[(entry.s, entry.error)], ledger=ledger,
                    binary_iterations=budget.drift_binary_iterations, bo_iterations=mon.bo_iterations,
                    shift=active, draw_base=RETUNE_DRAW_BASE + 8 * b, mode="drift",
                )
                entries[key] = CacheEntry.from_result(res)
                retunes.append((b, res))
                rec.retuned = True
                mon.reset()
    new_cache = replace(cache, entries=[entries[k] for k in sorted(entries)])
    return DriftLog(records, retunes, new_cache)

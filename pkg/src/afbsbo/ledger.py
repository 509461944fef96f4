"""Evaluation accounting, modeled cost, and fidelity rank correlation.

Every simulator evaluation a tuner makes is appended to a
:class:`CostLedger`. Reports price the counts two ways: *measured* (counts
times per-evaluation prices) and *paper* (fixed per-stage subtotals:
398 ms per cold head, 240 per warm head, 840 per grid layer; the cold
figure carries 50 ms of surrogate overhead the prices do not).
"""
from __future__ import annotations

import csv
import threading
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from .errors import UndefinedCorrelationError

HeadKey = Tuple[int, int]
REPORT_COLUMNS = ("layer", "head", "evals_low", "evals_high", "measured_ms", "paper_ms", "sparsity", "error", "fallback")
# head kinds produced by the Algorithm-1 pipeline
TUNED_KINDS = ("cold", "warm", "drift")


@dataclass(frozen=True)
class CostModel:
    """Per-evaluation prices in milliseconds."""

    c_low: float = 5.0
    c_high: float = 21.0
    gp_overhead: float = 50.0
    # paper-accounting subtotals
    stage1_cold: float = 125.0
    stage2_cold: float = 168.0
    stage3: float = 105.0
    warm_head: float = 240.0
    drift_head: float = 240.0

    def __post_init__(self):
        for name in ("c_low", "c_high", "gp_overhead"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def cold_head(self) -> float:
        return self.stage1_cold + self.stage2_cold + self.stage3

    def measured(self, evals_low: int, evals_high: int) -> float:
        return evals_low * self.c_low + evals_high * self.c_high

    def paper(self, kind: str, evals_low: int, evals_high: int, fallback_evals: int = 0) -> float:
        """Paper-accounting cost of one head, by how it was tuned."""
        if kind == "cold":
            return self.cold_head + fallback_evals * self.c_high
        if kind == "warm":
            return self.warm_head + fallback_evals * self.c_high
        if kind == "drift":
            return self.drift_head + fallback_evals * self.c_high
        if kind == "bo":
            return evals_low * self.c_low + self.gp_overhead + evals_high * self.c_high
        # grid, random and plain evaluation runs are all-high or priced per evaluation
        return self.measured(evals_low, evals_high)


def efficiency_factor(alpha: float, c_low: float, c_high: float) -> float:
    """Multi-fidelity cost reduction when a fraction ``alpha`` runs cheap."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if c_low <= 0 or c_high <= 0:
        raise ValueError("costs must be positive")
    return 1.0 / ((1.0 - alpha) + alpha * c_low / c_high)


@dataclass(frozen=True)
class LedgerEntry:
    layer: int
    head: int
    step: int
    stage: str
    fidelity: str


class CostLedger:
    """Append-only evaluation log, safe for concurrent producers.

    Entries carry a per-head step index, so sorting by (layer, head, step)
    gives the same order whatever the interleaving of appends.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._entries: List[LedgerEntry] = []
        self._steps: Counter = Counter()
        self._kinds: Dict[HeadKey, str] = {}

    def begin_head(self, layer: int, head: int, kind: str) -> None:
        with self._lock:
            self._kinds[(layer, head)] = kind

    def record_eval(self, layer: int, head: int, stage: str, fidelity: str) -> LedgerEntry:
        if fidelity not in ("low", "high"):
            raise ValueError(f"unknown fidelity {fidelity!r}")
        if layer < 0 or head < 0:
            raise ValueError("layer and head must be non-negative")
        with self._lock:
            key = (layer, head)
            entry = LedgerEntry(layer, head, self._steps[key], stage, fidelity)
            self._steps[key] += 1
            self._entries.append(entry)
            self._kinds.setdefault(key, "eval")
        return entry

    def __len__(self) -> int:
        return len(self._entries)

    def entries(self) -> List[LedgerEntry]:
        with self._lock:
            return sorted(self._entries, key=lambda e: (e.layer, e.head, e.step))

    def kinds(self) -> Dict[HeadKey, str]:
        with self._lock:
            return dict(self._kinds)

    def counts(self) -> Dict[HeadKey, Dict[str, int]]:
        """Per-head counts keyed by fidelity and by stage."""
        out: Dict[HeadKey, Dict[str, int]] = {}
        for e in self.entries():
            c = out.setdefault((e.layer, e.head), Counter())
            c[e.fidelity] += 1
            c[e.stage] += 1
        return {k: dict(v) for k, v in out.items()}


@dataclass
class HeadCost:
    layer: int
    head: int
    kind: str
    evals_low: int
    evals_high: int
    measured_ms: float
    paper_ms: float
    fallback_evals: int = 0
    complete: bool = True
    sparsity: float = float("nan")
    error: float = float("nan")
    fallback: bool = False


@dataclass
class CostReport:
    heads: List[HeadCost] = field(default_factory=list)
    evals_low: int = 0
    evals_high: int = 0
    measured_ms: float = 0.0
    paper_ms: float = 0.0
    grid_points: int = 40
    grid_paper_ms: float = 0.0
    count_grid_points: int = 175
    grid_evals: int = 0
    wall_clock_s: float = 0.0
    partial: bool = False

    @property
    def evals(self) -> int:
        return self.evals_low + self.evals_high

    @property
    def speedup_paper(self) -> Optional[float]:
        return self.grid_paper_ms / self.paper_ms if self.paper_ms > 0 else None

    @property
    def speedup_measured(self) -> Optional[float]:
        return self.grid_paper_ms / self.measured_ms if self.measured_ms > 0 else None

    @property
    def eval_ratio(self) -> Optional[float]:
        return self.grid_evals / self.evals if self.evals > 0 else None


def speedup_report(
    ledger: CostLedger,
    cost: CostModel = CostModel(),
    grid_points: int = 40,
    count_grid_points: int = 175,
    results: Optional[Iterable] = None,
    wall_clock_s: float = 0.0,
) -> CostReport:
    """Price a ledger and compare it with exhaustive grid search.

    The grid reference spends ``grid_points`` high-fidelity evaluations per
    tuned unit for the time comparison and ``count_grid_points`` for the
    evaluation-count comparison. A head tuned by the three-stage pipeline
    without its validation stage marks the report partial.
    """
    by_head = {(r.layer, r.head): r for r in (results or [])}
    kinds = ledger.kinds()
    counts = ledger.counts()
    report = CostReport(grid_points=grid_points, count_grid_points=count_grid_points, wall_clock_s=wall_clock_s)
    units = 0
    for key in sorted(set(kinds) | set(counts)):
        c = counts.get(key, {})
        kind = kinds.get(key, "eval")
        low, high = c.get("low", 0), c.get("high", 0)
        fallback_evals = max(c.get("stage3", 0) - 5, 0)
        complete = kind not in TUNED_KINDS or c.get("stage3", 0) >= 5
        hc = HeadCost(key[0], key[1], kind, low, high, cost.measured(low, high),
                      cost.paper(kind, low, high, fallback_evals), fallback_evals, complete)
        r = by_head.get(key)
        if r is not None:
            hc.sparsity, hc.error, hc.fallback = r.sparsity, r.error, r.fallback_applied
        report.heads.append(hc)
        report.evals_low += low
        report.evals_high += high
        report.measured_ms += hc.measured_ms
        report.paper_ms += hc.paper_ms
        report.partial |= not complete
        if kind in TUNED_KINDS:
            units += 1
    report.grid_paper_ms = units * grid_points * cost.c_high
    report.grid_evals = units * count_grid_points
    return report


def write_report(path, report: CostReport) -> None:
    """Tab-separated per-head table followed by a totals row."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for h in report.heads:
            w.writerow([h.layer, h.head, h.evals_low, h.evals_high, f"{h.measured_ms:.1f}", f"{h.paper_ms:.1f}",
                        f"{h.sparsity:.6f}", f"{h.error:.6f}", int(h.fallback)])
        w.writerow(["total", "", report.evals_low, report.evals_high, f"{report.measured_ms:.1f}",
                    f"{report.paper_ms:.1f}", "", "", sum(int(h.fallback) for h in report.heads)])


def read_report(path) -> List[Dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh, delimiter="\t"))


def fidelity_rank_correlation(s_grid: Sequence[float], low: Sequence[float], high: Sequence[float]) -> float:
    """Spearman correlation of low- and high-fidelity errors over an s-grid.

    Ties get average ranks. Raises :class:`UndefinedCorrelationError` when
    either vector is constant.
    """
    low = np.asarray(low, dtype=float)
    high = np.asarray(high, dtype=float)
    if not len(s_grid) == len(low) == len(high):
        raise ValueError("s-grid and error vectors must have equal length")
    if len(low) < 3:
        raise ValueError("need at least 3 points")
    if np.ptp(low) == 0 or np.ptp(high) == 0:
        raise UndefinedCorrelationError("undefined correlation: constant error vector")
    r_low, r_high = rankdata(low), rankdata(high)
    r_low -= r_low.mean()
    r_high -= r_high.mean()
    rho = float(r_low @ r_high / np.sqrt((r_low @ r_low) * (r_high @ r_high)))
    return min(1.0, max(-1.0, rho))

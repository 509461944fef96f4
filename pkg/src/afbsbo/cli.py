"""Command-line entry points: tune, evaluate, correlate, drift.

Exit status 0 on success, 2 on unusable input, 3 when tuning failed for
every head.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from typing import List, Optional

import numpy as np

from .attn_sim import Shift, WorkloadSpec, evaluate_params, generate_workload
from .cache import ConfigCache, model_id
from .drift import run_drift
from .errors import InvalidBoundsError, InvalidSpecError, UndefinedCorrelationError
from .latent import DEFAULT_BOUNDS, LatentBounds
from .ledger import CostLedger, CostModel, fidelity_rank_correlation, speedup_report, write_report
from .optimizer import (
    ErrorBand,
    TuneBudget,
    TuneResult,
    grid_search_baseline,
    head_inputs,
    random_search_baseline,
    tune_model,
)

log = logging.getLogger("afbsbo")

EXIT_OK, EXIT_INPUT, EXIT_TUNING = 0, 2, 3
# fresh inputs for cmd_evaluate; distinct from tuning, validation and drift draws
EVAL_DRAW = 1000


class InputError(Exception):
    pass


def _load_spec(args) -> WorkloadSpec:
    spec = WorkloadSpec.load(args.workload) if args.workload else WorkloadSpec()
    if args.seed is not None:
        spec = WorkloadSpec.from_dict({**spec.to_dict(), "seed": args.seed})
    return spec


def _load_tuner_config(path) -> LatentBounds:
    if path is None:
        return DEFAULT_BOUNDS
    with open(path) as fh:
        d = json.load(fh)
    return LatentBounds.from_dict({**DEFAULT_BOUNDS.as_dict(), **d})


def _band(args) -> ErrorBand:
    try:
        return ErrorBand(args.eps_low, args.eps_high)
    except ValueError as exc:
        raise InputError(str(exc)) from exc


def _write_rows(path, header, rows) -> None:
    fh = open(path, "w", newline="") if path else sys.stdout
    try:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    finally:
        if path:
            fh.close()


def _baseline_results(workload, band, bounds, mode, grid_points, budget, seed, ledger) -> List[TuneResult]:
    results = []
    for layer, head in workload.heads():
        ledger.begin_head(layer, head, mode)
        inputs = head_inputs(workload, layer, head, bounds, n_validation=0,
                             ledger=None)
        hook = lambda fid, l=layer, h=head: ledger.record_eval(l, h, mode, fid)
        inputs.high.on_eval = hook
        if mode == "grid":
            r = grid_search_baseline(inputs.high, band, grid_points, bounds)
        else:
            r = random_search_baseline(inputs.high, band, budget, seed=seed * 100_003 + layer * 1009 + head, bounds=bounds)
        r.layer, r.head = layer, head
        results.append(r)
    return results


def cmd_tune(args) -> int:
    spec = _load_spec(args)
    band = _band(args)
    bounds = _load_tuner_config(args.config)
    workload = generate_workload(spec)
    ledger = CostLedger()
    start = time.perf_counter()
    if args.mode == "afbs":
        results = tune_model(workload, band, bounds, TuneBudget(), per_layer=args.per_layer, ledger=ledger)
    else:
        results = _baseline_results(workload, band, bounds, args.mode, args.grid_points, args.budget, spec.seed, ledger)
    elapsed = time.perf_counter() - start
    cache = ConfigCache.from_results(results, model_id(spec), band, bounds)
    if args.out:
        cache.write(args.out)
    else:
        sys.stdout.write(cache.dumps())
    report = speedup_report(ledger, CostModel(), grid_points=args.grid_points, results=results, wall_clock_s=elapsed)
    if args.report:
        write_report(args.report, report)
    log.info("evaluations: %d low, %d high; modeled %.0f ms measured, %.0f ms paper-accounting",
             report.evals_low, report.evals_high, report.measured_ms, report.paper_ms)
    if report.speedup_paper is not None:
        log.info("vs %d-point grid: %.2fx (paper accounting), %.2fx (measured)",
                 args.grid_points, report.speedup_paper, report.speedup_measured)
    if all(r.band_miss for r in results):
        log.error("no head produced an in-band configuration")
        return EXIT_TUNING
    return EXIT_OK


def _check_compatible(cache: ConfigCache, spec: WorkloadSpec) -> None:
    prefix = f"synthetic-L{spec.layers}-H{spec.heads}-d{spec.head_dim}-B{spec.block_size}-"
    if not cache.model_id.startswith(prefix):
        raise InputError(f"cache {cache.model_id!r} was not tuned for this workload shape ({prefix}...)")
    keys = {(e.layer, e.head) for e in cache.entries}
    expected = {(l, h) for l in range(spec.layers) for h in range(spec.heads)}
    if keys != expected:
        raise InputError("cache entries do not cover exactly the workload's heads")


def cmd_evaluate(args) -> int:
    spec = _load_spec(args)
    cache = ConfigCache.read(args.config)
    _check_compatible(cache, spec)
    workload = generate_workload(spec)
    grid = workload.grid("high")
    rows = []
    for e in sorted(cache.entries, key=lambda e: (e.layer, e.head)):
        Q, K, V = workload.draw(e.layer, e.head, "high", EVAL_DRAW)
        err, sp = evaluate_params(Q, K, V, e.params, grid)
        rows.append([e.layer, e.head, f"{err:.6f}", f"{sp:.6f}", int(err <= cache.band.eps_high)])
    _write_rows(args.out, ["layer", "head", "error", "sparsity", "within_band"], rows)
    return EXIT_OK


def correlate_head(workload, layer, head, s_grid, bounds=DEFAULT_BOUNDS, ledger=None):
    """Low/high error vectors on ``s_grid`` and their rank correlation."""
    inputs = head_inputs(workload, layer, head, bounds, n_validation=0)
    if ledger is not None:
        ledger.begin_head(layer, head, "correlate")
        inputs.low.on_eval = lambda fid: ledger.record_eval(layer, head, "correlate", fid)
        inputs.high.on_eval = lambda fid: ledger.record_eval(layer, head, "correlate", fid)
    low = [inputs.low(float(s)).error for s in s_grid]
    high = [inputs.high(float(s)).error for s in s_grid]
    try:
        rho = fidelity_rank_correlation(s_grid, low, high)
    except UndefinedCorrelationError:
        rho = None
    return low, high, rho


def cmd_correlate(args) -> int:
    if args.grid_points < 5:
        raise InputError("correlate needs at least 5 grid points")
    spec = _load_spec(args)
    workload = generate_workload(spec)
    s_grid = np.linspace(0.0, 1.0, args.grid_points)
    rows, rhos = [], []
    for layer, head in workload.heads():
        _, _, rho = correlate_head(workload, layer, head, s_grid)
        rows.append([layer, head, "undefined" if rho is None else f"{rho:.6f}"])
        if rho is not None:
            rhos.append(rho)
    if rhos:
        rows.append(["mean", "", f"{np.mean(rhos):.6f}"])
        rows.append(["std", "", f"{np.std(rhos):.6f}"])
    _write_rows(args.out, ["layer", "head", "rho"], rows)
    return EXIT_OK


def _shift(args) -> Shift:
    if args.shift_kind == "bandwidth":
        return Shift(bandwidth_factor=args.shift_value if args.shift_value is not None else 2.0)
    return Shift(sinks=int(args.shift_value) if args.shift_value is not None else 0)


def cmd_drift(args) -> int:
    if args.batches < 1:
        raise InputError("--batches must be >= 1")
    spec = _load_spec(args)
    cache = ConfigCache.read(args.config)
    _check_compatible(cache, spec)
    workload = generate_workload(spec)
    shift = _shift(args) if args.shift_at is not None else None
    ledger = CostLedger()
    result = run_drift(workload, cache, args.batches, shift, args.shift_at, ledger=ledger)
    rows = [[r.batch, r.layer, r.head, f"{r.error:.6f}", f"{r.sparsity:.6f}", int(r.shifted), int(r.triggered),
             int(r.retuned)] for r in result.records]
    _write_rows(args.report, ["batch", "layer", "head", "error", "sparsity", "shifted", "triggered", "retuned"], rows)
    for b, r in result.retunes:
        log.info("batch %d: re-tuned head (%d, %d) -> s=%.4f sparsity=%.3f%s", b, r.layer, r.head, r.s_best,
                 r.sparsity, " (dense fallback)" if r.band_miss else "")
    if result.retunes and args.out:
        result.cache.write(args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="afbsbo", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--workload", help="workload structure spec (JSON); default synthetic spec if omitted")
        p.add_argument("--seed", type=int, default=None, help="override the spec seed")
        p.add_argument("--eps-low", type=float, default=0.045)
        p.add_argument("--eps-high", type=float, default=0.055)

    p = sub.add_parser("tune", help="tune every head and write a config cache")
    common(p)
    p.add_argument("--config", help="tuner configuration with latent bounds (JSON)")
    p.add_argument("--out", help="config cache path (stdout if omitted)")
    p.add_argument("--report", help="per-head cost report (TSV)")
    p.add_argument("--mode", choices=("afbs", "grid", "random"), default="afbs")
    p.add_argument("--grid-points", type=int, default=40)
    p.add_argument("--budget", type=int, default=50, help="random-search evaluations per head")
    p.add_argument("--per-layer", action="store_true", help="tune head 0 of each layer and broadcast")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("evaluate", help="apply a config cache to fresh inputs")
    common(p)
    p.add_argument("--config", required=True, help="config cache")
    p.add_argument("--out", help="result table (stdout if omitted)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("correlate", help="rank-correlate low- and high-fidelity errors")
    common(p)
    p.add_argument("--grid-points", type=int, default=21)
    p.add_argument("--out", help="correlation table (stdout if omitted)")
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("drift", help="stream batches, monitor drift, re-tune on trigger")
    common(p)
    p.add_argument("--config", required=True, help="config cache")
    p.add_argument("--batches", type=int, default=200)
    p.add_argument("--shift-at", type=int, default=None, help="first batch drawn from the shifted structure")
    p.add_argument("--shift-kind", choices=("sinks", "bandwidth"), default="sinks")
    p.add_argument("--shift-value", type=float, default=None,
                   help="new sink count, or bandwidth factor (defaults 0 and 2)")
    p.add_argument("--out", help="updated config cache, written only if a re-tune happened")
    p.add_argument("--report", help="per-batch drift log (stdout if omitted)")
    p.set_defaults(func=cmd_drift)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (InputError, InvalidSpecError, InvalidBoundsError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

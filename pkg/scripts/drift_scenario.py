"""Tune a small model, remove its attention sinks mid-stream and watch re-calibration.

    python scripts/drift_scenario.py --heads 4 --shift-at 50 --batches 150
"""
import argparse
import sys

import numpy as np

from afbsbo.attn_sim import Shift, WorkloadSpec, generate_workload
from afbsbo.cache import ConfigCache, model_id
from afbsbo.drift import run_drift
from afbsbo.latent import DEFAULT_BOUNDS
from afbsbo.optimizer import ErrorBand, tune_model


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--heads", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--batches", type=int, default=150)
    ap.add_argument("--shift-at", type=int, default=50)
    ap.add_argument("--sinks", type=int, default=0, help="sink count after the shift")
    ap.add_argument("--bandwidth-factor", type=float, default=1.0)
    args = ap.parse_args(argv)

    spec = WorkloadSpec(layers=1, heads=args.heads, seed=args.seed)
    wl = generate_workload(spec)
    band = ErrorBand()
    cache = ConfigCache.from_results(tune_model(wl), model_id(spec), band, DEFAULT_BOUNDS)
    shift = Shift(args.bandwidth_factor, args.sinks)
    log = run_drift(wl, cache, args.batches, shift, args.shift_at)

    for b, r in log.retunes:
        print(f"batch {b}: head {r.head} re-tuned to s={r.s_best:.3f} (sparsity {r.sparsity:.3f})"
              + (" dense" if r.band_miss else ""))
    print("head  pre-shift  shifted  post-retune  violations-after")
    for _, head in wl.heads():
        rec = [r for r in log.records if r.head == head]
        last = max((b for b, r in log.retunes if r.head == head), default=args.shift_at - 1)
        pre = [r.error for r in rec if r.batch < args.shift_at]
        mid = [r.error for r in rec if args.shift_at <= r.batch <= last]
        post = np.array([r.error for r in rec if r.batch > last])
        print(f"{head:4d}  {np.mean(pre):9.4f}  {np.mean(mid) if mid else float('nan'):7.4f}  "
              f"{post.mean() if len(post) else float('nan'):11.4f}  {int((post > band.eps_high).sum()):>5d}/{len(post)}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

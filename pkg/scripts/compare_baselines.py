"""Per-seed comparison of the tuner against random search, BO-only and the fine-grid optimum.

Each seed is a single-head workload; columns are accepted sparsities and
the tuner's accepted error. Medians go to stderr.

    python scripts/compare_baselines.py --seeds 20 --out quality.tsv
"""
import argparse
import csv
import sys

import numpy as np

from afbsbo.attn_sim import WorkloadSpec, generate_workload
from afbsbo.optimizer import (
    ErrorBand,
    bo_only_baseline,
    constrained_optimum,
    head_inputs,
    random_search_baseline,
    tune_head,
)


def run_seed(seed, band, budget, grid_points):
    wl = generate_workload(WorkloadSpec(layers=1, heads=1, seed=seed))
    inputs = head_inputs(wl, 0, 0)
    afbs = tune_head(wl, 0, 0, band, inputs=inputs)
    _, opt, _ = constrained_optimum(inputs.high, band, np.linspace(0.0, 1.0, grid_points))
    rnd = random_search_baseline(inputs.high, band, budget, seed)
    bo = bo_only_baseline(inputs.low, inputs.high, band)
    return [seed, afbs.sparsity, afbs.error, int(afbs.fallback_applied), int(afbs.band_miss), rnd.sparsity,
            bo.sparsity, opt]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--budget", type=int, default=50, help="random-search evaluations")
    ap.add_argument("--grid-points", type=int, default=1001)
    ap.add_argument("--out", help="TSV path (stdout if omitted)")
    args = ap.parse_args(argv)

    band = ErrorBand()
    rows = [run_seed(seed, band, args.budget, args.grid_points) for seed in range(args.seeds)]
    header = ["seed", "afbs", "afbs_error", "fallback", "band_miss", "random", "bo_only", "optimum"]
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    w = csv.writer(fh, delimiter="\t", lineterminator="\n")
    w.writerow(header)
    w.writerows([[f"{x:.6f}" if isinstance(x, float) else x for x in r] for r in rows])
    if args.out:
        fh.close()

    a = np.array([r[1:] for r in rows], dtype=float)
    gap = a[:, 6] - a[:, 0]
    print(f"median sparsity: afbs {np.median(a[:, 0]):.3f}  random {np.median(a[:, 4]):.3f}  "
          f"bo-only {np.median(a[:, 5]):.3f}  optimum {np.median(a[:, 6]):.3f}", file=sys.stderr)
    print(f"within 0.05 of optimum: {np.mean(gap <= 0.05):.0%}; max error {a[:, 1].max():.4f}; "
          f"fallbacks {int(a[:, 2].sum())}, band misses {int(a[:, 3].sum())}", file=sys.stderr)


if __name__ == "__main__":
    main()

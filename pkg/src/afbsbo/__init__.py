"""Multi-fidelity Bayesian tuning of block-sparse attention thresholds.

Modules
-------
attn_sim   synthetic attention workloads, block-sparse and dense attention
latent     one-dimensional latent map onto (tau, theta, lambda)
gp         Matern-5/2 Gaussian process, expected improvement, UCB regions
optimizer  three-stage tuner and baselines
ledger     evaluation accounting and rank correlation
cache      persistent per-head configuration cache
drift      runtime drift monitor and re-calibration
cli        command-line entry points
"""
from .attn_sim import (
    BlockGrid,
    Shift,
    Workload,
    WorkloadSpec,
    build_coarse_mask,
    dense_attention,
    evaluate_params,
    generate_workload,
    relative_l1,
    sparse_attention,
)
from .cache import ConfigCache, model_id
from .drift import DriftMonitorState, run_drift
from .gp import expected_improvement, extract_low_ucb_regions, gp_fit, gp_posterior, matern52, propose_next
from .latent import DEFAULT_BOUNDS, LatentBounds, SparseParams, map_s_to_params, validate_bounds
from .ledger import CostLedger, CostModel, efficiency_factor, fidelity_rank_correlation, speedup_report
from .optimizer import ErrorBand, TuneBudget, TuneResult, tune_head, tune_model

__version__ = "0.1.0"

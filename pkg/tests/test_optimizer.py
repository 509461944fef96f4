import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from afbsbo.attn_sim import Workload, WorkloadSpec, draw_head, generate_workload
from afbsbo.gp import Region
from afbsbo.ledger import CostLedger
from afbsbo.optimizer import (
    ErrorBand,
    TuneBudget,
    bo_only_baseline,
    constrained_optimum,
    grid_search_baseline,
    head_inputs,
    random_search_baseline,
    stage1_explore,
    stage2_refine,
    stage3_validate,
    tune_head,
    tune_model,
)

from conftest import SMALL_SPEC

BAND = ErrorBand()


class Counted:
    """Synthetic evaluator ``error(s) = f(s)`` that reports sparsity ``s``."""

    def __init__(self, f):
        self.f = f
        self.calls = []

    def __call__(self, s):
        self.calls.append(s)
        return self.f(s), s


def linear(s):
    return 0.1 * s


# ---- stage 1 ------------------------------------------------------------------


def test_stage1_monotone_boundary():
    ev = Counted(linear)
    st1 = stage1_explore(ev, BAND)
    assert len(ev.calls) == 15
    assert ev.calls[:3] == [0.2, 0.5, 0.8]
    assert 0.5 <= st1.regions[0].s_high <= 0.6


def test_stage1_constant_is_everywhere_feasible():
    st1 = stage1_explore(Counted(lambda s: 0.01), BAND)
    assert [(r.s_low, r.s_high) for r in st1.regions] == [(0.0, 1.0)]


def test_stage1_warm_start_uses_eight_fresh_points():
    ev = Counted(linear)
    prior = [(0.1, 0.01), (0.3, 0.03), (0.7, 0.07)]
    st1 = stage1_explore(ev, BAND, warm_start=prior)
    assert len(ev.calls) == 8
    assert len(st1.observations) == 8
    assert st1.model.n == 11
    # pseudo-observations carry the inflated noise
    assert np.allclose(st1.model.noise[:3], 1e-5)


@given(st.integers(0, 2 ** 31 - 1))
def test_regret_trace_non_increasing(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(0.05, 0.2), rng.uniform(0, 0.02)
    st1 = stage1_explore(Counted(lambda s: a * s + b * np.sin(20 * s)), BAND)
    assert np.all(np.diff(st1.regret_trace) <= 0)


# ---- stage 2 ------------------------------------------------------------------


def test_stage2_hand_trace():
    ev = Counted(linear)
    st2 = stage2_refine(ev, [Region(0.5, 1.0)], BAND, iterations=4, n_regions=1)
    assert ev.calls == [0.75, 0.625, 0.5625, 0.53125]
    assert st2.s_best == 0.53125
    assert not st2.band_miss


def test_stage2_unit_region_precision():
    st2 = stage2_refine(Counted(linear), [Region(0.0, 1.0)], BAND, iterations=4, n_regions=1)
    lo, hi = st2.brackets[0]
    assert hi - lo == 0.0625


@given(st.floats(0.0, 0.9), st.floats(0.05, 1.0), st.floats(0.0, 1.0), st.integers(1, 8))
def test_bracket_halving(lo, width, boundary, k):
    hi = min(1.0, lo + width)
    ev = Counted(lambda s: 0.05 if s <= boundary else 0.06)
    st2 = stage2_refine(ev, [Region(lo, hi)], BAND, iterations=k, n_regions=1)
    b_lo, b_hi = st2.brackets[0]
    assert b_hi - b_lo == pytest.approx((hi - lo) * 0.5 ** k, rel=1e-12, abs=1e-15)
    assert len(ev.calls) == k


def test_stage2_infeasible_everywhere():
    ev = Counted(lambda s: 0.06)
    st2 = stage2_refine(ev, [Region(0.2, 0.6), Region(0.0, 0.1)], BAND, iterations=4)
    assert st2.band_miss
    assert st2.s_best == 0.2
    assert len(ev.calls) == 8


def test_stage2_second_region_wins_when_sparser():
    ev = Counted(lambda s: 0.05 if s < 0.3 or 0.6 < s < 0.8 else 0.2)
    st2 = stage2_refine(ev, [Region(0.0, 0.3), Region(0.6, 0.8)], BAND, iterations=3)
    assert 0.6 < st2.s_best < 0.8


def test_stage2_lone_region_keeps_bisecting():
    ev = Counted(linear)
    st2 = stage2_refine(ev, [Region(0.0, 1.0)], BAND, iterations=4, n_regions=2)
    assert len(ev.calls) == 8
    assert st2.brackets[1][1] - st2.brackets[1][0] == 1 / 256
    assert abs(st2.s_best - 0.55) < 1 / 256


def test_stage2_needs_a_region():
    with pytest.raises(ValueError):
        stage2_refine(Counted(linear), [], BAND)


# ---- stage 3 ------------------------------------------------------------------


def fixed(errors):
    return [lambda s, e=e: (e, 0.5) for e in errors]


def test_stage3_accepts_in_band():
    st3 = stage3_validate(fixed([0.050, 0.052, 0.054, 0.053, 0.051]), 0.6, BAND)
    assert not st3.fallback_applied and st3.s == 0.6


def test_stage3_fallback_is_bit_exact():
    calls = []

    def make(e):
        def v(s):
            calls.append(s)
            return (e if s == 0.6 else 0.05), 0.4
        return v

    st3 = stage3_validate([make(e) for e in (0.05, 0.06, 0.05, 0.05, 0.05)], 0.6, BAND)
    assert st3.fallback_applied
    assert st3.s == 0.9 * 0.6
    assert st3.worst_index == 1
    assert len(calls) == 6


def test_stage3_needs_five_inputs():
    with pytest.raises(ValueError):
        stage3_validate(fixed([0.05] * 4), 0.5, BAND)


# ---- full head / model --------------------------------------------------------


def test_tune_head_budget_identity(small_workload):
    ledger = CostLedger()
    r = tune_head(small_workload, 0, 0, ledger=ledger)
    assert (r.evals_low, r.evals_high) == (15, 13 + int(r.fallback_applied))
    c = ledger.counts()[(0, 0)]
    assert (c["low"], c["high"]) == (r.evals_low, r.evals_high)
    assert len(r.validation_errors) == 5
    assert len(r.regret_trace) == 15


def test_tune_head_warm_budget_identity(small_workload):
    cold = tune_head(small_workload, 0, 0)
    warm = tune_head(small_workload, 0, 1, warm_start=cold.transfer)
    assert (warm.evals_low, warm.evals_high) == (8, 11 + int(warm.fallback_applied))
    assert warm.mode == "warm"


def test_tune_head_deterministic(small_workload):
    a = tune_head(small_workload, 0, 1)
    b = tune_head(generate_workload(SMALL_SPEC), 0, 1)
    assert a == b


@given(st.integers(0, 2 ** 16))
def test_accepted_results_are_feasible(seed):
    wl = generate_workload(WorkloadSpec(layers=1, heads=1, head_dim=16, seq_len_low=64, seq_len_high=128,
                                        block_size=8, bandwidth=12.0, sinks=4, rank=2, seed=seed))
    r = tune_head(wl, 0, 0)
    if r.band_miss:
        assert r.s_best == 0.0
        return
    assert BAND.contains(r.candidate_error)
    if not r.fallback_applied:
        assert max(r.validation_errors) <= BAND.eps_high
    else:
        assert r.s_best == 0.9 * r.pre_fallback_s


def test_tune_model_evaluation_total():
    spec = WorkloadSpec(layers=12, heads=1, head_dim=16, seq_len_low=64, seq_len_high=128, block_size=8,
                        bandwidth=12.0, sinks=4, rank=2, seed=5)
    results = tune_model(generate_workload(spec))
    fallbacks = sum(r.fallback_applied for r in results)
    assert sum(r.evals_low + r.evals_high for r in results) == 28 + 11 * 19 + fallbacks
    assert [r.mode for r in results] == ["cold"] + ["warm"] * 11


def test_single_head_model_is_a_cold_tune(small_workload):
    spec = WorkloadSpec(**{**SMALL_SPEC.to_dict(), "heads": 1})
    wl = generate_workload(spec)
    assert tune_model(wl) == [tune_head(wl, 0, 0)]


def test_per_layer_broadcast(small_workload):
    ledger = CostLedger()
    results = tune_model(small_workload, per_layer=True, ledger=ledger)
    assert [(r.layer, r.head) for r in results] == [(0, 0), (0, 1)]
    assert results[1].s_best == results[0].s_best and results[1].mode == "broadcast"
    assert set(ledger.counts()) == {(0, 0)}


class MixedWorkload(Workload):
    """Head 0 from one structure spec, head 1 from another."""

    def __init__(self, specs):
        self.specs = specs
        merged = WorkloadSpec(**{**specs[0].to_dict(), "heads": len(specs)})
        tensors = {}
        for h, sp in enumerate(specs):
            for fid, n in (("low", sp.seq_len_low), ("high", sp.seq_len_high)):
                tensors[(0, h, fid)] = draw_head(sp, 0, 0, n, 0)
        super().__init__(merged, tensors)

    def draw(self, layer, head, fidelity, draw=0, shift=None):
        if draw == 0 and shift is None:
            return self.tensors[(layer, head, fidelity)]
        sp = self.specs[head] if shift is None else shift.apply(self.specs[head])
        return draw_head(sp, 0, 0, self.seq_len(fidelity), draw)


def test_local_heads_sparser_than_diffuse():
    wins, seeds = 0, range(8)
    for seed in seeds:
        local = WorkloadSpec(layers=1, heads=1, seed=seed)
        diffuse = WorkloadSpec(layers=1, heads=1, bandwidth=0, sinks=0, seed=seed)
        r_local, r_diffuse = tune_model(MixedWorkload([local, diffuse]))
        wins += r_local.sparsity > r_diffuse.sparsity
    assert wins >= 0.8 * len(seeds)


def test_warm_start_on_homogeneous_heads():
    spec = WorkloadSpec(layers=1, heads=1, seed=4)
    wl = MixedWorkload([spec] * 6)
    # every head shares the structure; give each its own tuning noise draw
    for h in range(6):
        for fid, n in (("low", spec.seq_len_low), ("high", spec.seq_len_high)):
            wl.tensors[(0, h, fid)] = draw_head(spec, 0, 0, n, 100 + h)
    warm = tune_model(wl, warm=True)
    cold = tune_model(wl, warm=False)
    assert all(w.evals_low == 8 for w in warm[1:]) and all(c.evals_low == 15 for c in cold)
    assert np.median([abs(w.sparsity - c.sparsity) for w, c in zip(warm, cold)]) <= 0.05


# ---- baselines ----------------------------------------------------------------


def test_grid_example():
    ev = Counted(linear)
    r = grid_search_baseline(ev, BAND, 40)
    assert r.s_best == pytest.approx(21 / 39)
    assert len(ev.calls) == 40 and r.evals_high == 40


def test_grid_of_two():
    ev = Counted(linear)
    grid_search_baseline(ev, BAND, 2)
    assert ev.calls == [0.0, 1.0]


def test_random_single_infeasible_sample_is_dense():
    r = random_search_baseline(Counted(lambda s: 0.2), BAND, budget=1)
    assert r.band_miss and r.s_best == 0.0


def test_random_is_seeded():
    a, b, c = Counted(linear), Counted(linear), Counted(linear)
    random_search_baseline(a, BAND, 20, seed=3)
    random_search_baseline(b, BAND, 20, seed=3)
    random_search_baseline(c, BAND, 20, seed=4)
    assert a.calls == b.calls != c.calls


def test_bo_only_takes_largest_screened_feasible_point():
    low, high = Counted(linear), Counted(linear)
    r = bo_only_baseline(low, high, BAND)
    feasible = [s for s in low.calls if 0.1 * s <= 0.055]
    assert r.s_best == max(feasible) and len(high.calls) == 1


def test_constrained_optimum_brute_force():
    s, sp, e = constrained_optimum(Counted(linear), BAND, np.linspace(0, 1, 1001))
    # 0.1 * 0.55 rounds above 0.055, so the last feasible grid point is 0.549
    assert s == np.linspace(0, 1, 1001)[549] and BAND.contains(e)
    assert constrained_optimum(Counted(lambda s: 1.0), BAND)[0] == 0.0


def test_head_inputs_charge_the_ledger(small_workload):
    ledger = CostLedger()
    inp = head_inputs(small_workload, 0, 1, ledger=ledger)
    inp.low(0.3)
    inp.high(0.3)
    inp.validation[2](0.3)
    assert ledger.counts()[(0, 1)] == {"low": 1, "stage1": 1, "high": 2, "stage2": 1, "stage3": 1}


def test_budget_properties():
    b = TuneBudget()
    assert b.cold_evals == (15, 13) and b.warm_evals == (8, 11)

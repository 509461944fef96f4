import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import norm

from afbsbo.gp import (
    LATENT_GRID,
    expected_improvement,
    extract_low_ucb_regions,
    gp_fit,
    gp_posterior,
    matern52,
    propose_next,
)

from oracles import ei_monte_carlo, gp_posterior_inverse, matern52_scalar

GRID11 = np.linspace(0.0, 1.0, 11)


def random_dataset(rng, n):
    s = rng.uniform(0, 1, n)
    y = 0.1 * s + 0.02 * np.sin(9 * s) + 0.005 * rng.standard_normal(n)
    return list(zip(s, y))


def test_matern_examples():
    assert matern52(0.3, 0.3) == 1.0
    expected = (1 + math.sqrt(5) + 5 / 3) * math.exp(-math.sqrt(5))
    assert matern52(0.0, 0.2, 0.2) == pytest.approx(expected, abs=1e-12)
    assert matern52(0.0, 0.2, 0.2) == pytest.approx(0.5240, abs=1e-4)


@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(0.01, 3))
def test_matern_symmetric_and_bounded(a, b, ell):
    k = matern52(a, b, ell)
    assert k == matern52(b, a, ell)
    assert 0.0 <= k <= 1.0
    assert k == pytest.approx(matern52_scalar(a - b, ell), abs=1e-14)


def test_matern_rejects_bad_length_scale():
    with pytest.raises(ValueError):
        matern52(0, 1, 0.0)


def test_single_observation_interpolates():
    m = gp_fit([(0.5, 0.05)])
    mu, _ = gp_posterior(m, 0.5)
    assert mu == pytest.approx(0.05, abs=1e-6)


def test_constant_data():
    m = gp_fit([(0.2, 0.04), (0.6, 0.04)])
    mu, _ = gp_posterior(m, 0.4)
    assert mu == pytest.approx(0.04, abs=1e-6)


def test_posterior_matches_inverse_oracle_on_grid(rng):
    data = random_dataset(rng, 5)
    m = gp_fit(data)
    mu, var = gp_posterior(m, GRID11)
    mu_ref, var_ref = gp_posterior_inverse([d[0] for d in data], [d[1] for d in data], GRID11, 0.2, 1e-6)
    assert np.allclose(mu, mu_ref, rtol=0, atol=1e-8)
    assert np.allclose(var, var_ref, rtol=0, atol=1e-8)


def test_far_query_reverts_to_prior():
    data = [(0.0, 0.01), (0.02, 0.03)]
    m = gp_fit(data, length_scale=0.01)
    mu, var = gp_posterior(m, 1.0)
    assert mu == pytest.approx(0.02, abs=1e-9)
    assert var == pytest.approx(m.y_std ** 2, rel=1e-9)


def test_refit_equals_fit_from_scratch(rng):
    data = random_dataset(rng, 7)
    a = gp_fit(data[:6] + [data[6]])
    b = gp_fit(list(data))
    assert np.array_equal(gp_posterior(a, GRID11)[0], gp_posterior(b, GRID11)[0])


def test_duplicates_are_absorbed():
    m = gp_fit([(0.3, 0.02), (0.3, 0.02), (0.3, 0.0200001)])
    mu, var = gp_posterior(m, 0.3)
    assert mu == pytest.approx(0.02, abs=1e-6)
    assert var >= 0


@given(st.integers(1, 30), st.integers(0, 2 ** 31 - 1))
def test_factorization_and_variance(n, seed):
    rng = np.random.default_rng(seed)
    data = random_dataset(rng, n)
    m = gp_fit(data)
    assert m.jitter <= 1e-6
    mu, var = gp_posterior(m, LATENT_GRID[::10])
    assert np.all(var >= 0)
    _, var_obs = gp_posterior(m, m.s)
    far = LATENT_GRID[np.argmax(np.min(np.abs(LATENT_GRID[:, None] - m.s[None, :]), axis=1))]
    assert var_obs.max() <= gp_posterior(m, far)[1] + 1e-15


def test_per_observation_noise_loosens_the_fit():
    data = [(0.2, 0.01), (0.25, 0.05), (0.8, 0.09)]
    tight = gp_fit(data)
    loose = gp_fit(data, noise=np.array([1e-6, 1.0, 1e-6]))
    assert abs(gp_posterior(tight, 0.25)[0] - 0.05) < abs(gp_posterior(loose, 0.25)[0] - 0.05)


# ---- expected improvement ---------------------------------------------------


def test_ei_examples():
    assert expected_improvement(0.05, 0.0, 0.05) == 0.0
    assert expected_improvement(0.05, 0.01, 0.05) == pytest.approx(0.01 * norm.pdf(0), abs=1e-10)
    assert expected_improvement(0.05, 0.01, 0.05) == pytest.approx(0.0039894, abs=1e-7)
    ei = expected_improvement(0.05, 0.01, 0.06)
    assert ei == pytest.approx(0.01 * norm.cdf(1) + 0.01 * norm.pdf(1), abs=1e-12)
    assert ei == pytest.approx(0.010833, abs=1e-6)


def test_ei_zero_sigma_limit():
    assert expected_improvement(0.03, 0.0, 0.05) == pytest.approx(0.02)
    assert expected_improvement(0.07, 0.0, 0.05) == 0.0


def test_ei_matches_monte_carlo():
    rng = np.random.default_rng(7)
    for k in range(50):
        mu, sigma, f = rng.uniform(0, 0.1), rng.uniform(0.001, 0.03), rng.uniform(0, 0.1)
        assert abs(expected_improvement(mu, sigma, f) - ei_monte_carlo(mu, sigma, f, seed=k)) <= 2e-3


@given(st.floats(-1, 1), st.floats(0, 1), st.floats(-1, 1))
def test_ei_non_negative(mu, sigma, f):
    assert expected_improvement(mu, sigma, f) >= 0.0


# ---- proposals and regions ----------------------------------------------------


def test_degenerate_ei_ties_go_to_largest_s():
    assert propose_next(gp_fit([(0.5, 0.05)])) == 1.0


def test_proposal_matches_grid_oracle():
    data = [(0.2, 0.03), (0.5, 0.05), (0.8, 0.09)]
    m = gp_fit(data)
    mu, var = gp_posterior_inverse([d[0] for d in data], [d[1] for d in data], LATENT_GRID, 0.2, 1e-6)
    sd = np.sqrt(var)
    z = (0.03 - mu) / np.where(sd > 0, sd, 1)
    ei = np.where(sd > 0, (0.03 - mu) * norm.cdf(z) + sd * norm.pdf(z), np.maximum(0.03 - mu, 0))
    best = LATENT_GRID[np.flatnonzero(np.isclose(ei, ei.max(), rtol=1e-12, atol=0))[-1]]
    s_next = propose_next(m)
    assert s_next == pytest.approx(best, abs=1e-3)
    assert min(abs(s_next - d[0]) for d in data) > 0.05
    assert propose_next(m) == s_next


def test_observing_the_proposal_lowers_its_ei():
    data = [(0.2, 0.03), (0.5, 0.05), (0.8, 0.09)]
    m = gp_fit(data)
    s_next = propose_next(m)
    mu, var = gp_posterior(m, s_next)
    before = expected_improvement(mu, math.sqrt(var), 0.03)
    m2 = gp_fit(data + [(s_next, float(mu))])
    mu2, var2 = gp_posterior(m2, s_next)
    assert expected_improvement(mu2, math.sqrt(var2), 0.03) < before


def test_regions_everywhere_feasible():
    m = gp_fit([(0.0, 0.01), (0.5, 0.011), (1.0, 0.012)])
    assert [(r.s_low, r.s_high) for r in extract_low_ucb_regions(m, 0.055)] == [(0.0, 1.0)]


def test_regions_fallback_when_nothing_qualifies():
    m = gp_fit([(0.0, 0.3), (0.4, 0.2), (1.0, 0.5)])
    regions = extract_low_ucb_regions(m, 0.055)
    assert len(regions) == 1
    centre = LATENT_GRID[np.argmin(gp_posterior(m, LATENT_GRID)[0])]
    assert regions[0].s_low == pytest.approx(max(0.0, centre - 0.1))
    assert regions[0].s_high == pytest.approx(min(1.0, centre + 0.1))


def test_two_valleys_ranked_by_upper_end():
    s = np.linspace(0, 1, 21)
    y = np.where(np.abs(s - 0.25) < 0.08, 0.02, 0.12)
    y = np.where(np.abs(s - 0.75) < 0.08, 0.02, y)
    m = gp_fit(list(zip(s, y)))
    regions = extract_low_ucb_regions(m, 0.055)
    assert len(regions) == 2
    assert regions[0].s_low > 0.6 and regions[1].s_high < 0.4
    # independent scan of the grid
    mu, var = gp_posterior(m, LATENT_GRID)
    ok = mu + np.sqrt(var) <= 0.055
    assert ok[LATENT_GRID == regions[0].s_high].all() and ok[LATENT_GRID == regions[1].s_low].all()


def test_monotone_landscape_region_ends_near_boundary():
    data = [(s, 0.1 * s) for s in (0.0, 0.2, 0.4, 0.5, 0.6, 0.8, 1.0)]
    top = extract_low_ucb_regions(gp_fit(data), 0.055)[0]
    assert 0.5 <= top.s_high <= 0.6

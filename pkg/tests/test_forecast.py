from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from rainfall_gp.distributions import WeibullLogParams
from rainfall_gp.forecast import (
    conditional_mu,
    conditional_mu_many,
    draw_parameters_at,
    event_variance,
    expected_annual,
    expected_event_magnitude,
    expected_wet_days,
    forecast_functional_grid,
    functional_values,
    predictive_parameters,
    regular_grid,
    weibull_kl,
    weibull_kl_arrays,
)
from rainfall_gp.kernel import CorrelationCache, KernelParams, covariance_matrix, cross_covariance
from rainfall_gp.model import ChainState, GpBlockState, simulate_observations
from rainfall_gp.sampler import SamplerConfig, run_chain

# mpmath quadrature, 40 digits
KL_ORACLE = [((0.4, 0.2, -0.3, 0.9), 0.4555636854656953842),
             ((1.2, -0.5, 0.7, -0.1), 0.4780003324288917080)]
WEIBULL_MOMENTS = {(0.5, 1.0): (2.430871124598950054, 2.290629869328664216),
                   (0.3, 0.7): (1.846623660133867203, 1.912003217936380466)}


def _block(M, T, p, rng, **kw):
    base = dict(psi=rng.normal(), mu=rng.normal(size=M), field=rng.normal(size=(M, T)),
                tau2=0.7, sigma2=1.3, lambdas=rng.uniform(0.3, 2, p),
                zeta_psi=1.1, zeta_tau2=0.4, zeta_sigma2=0.9)
    base.update(kw)
    return GpBlockState(**base)


def test_functional_trivial_values():
    assert expected_event_magnitude(0.0, 0.0) == pytest.approx(1.0, abs=1e-15)
    assert expected_event_magnitude(0.0, 1.7) == pytest.approx(math.exp(1.7), rel=1e-14)
    assert event_variance(0.0, 0.0) == pytest.approx(1.0, abs=1e-14)
    assert expected_annual(0.0, 0.0, 0.0, 365) == pytest.approx(182.5)
    assert expected_annual(800.0, 0.3, 0.2, 365) == pytest.approx(365 * expected_event_magnitude(0.3, 0.2))
    assert expected_wet_days(0.0, 365) == 182.5
    assert expected_wet_days(800.0, 365) == 365.0


def test_functionals_match_high_precision_moments():
    for (g, d), (m, v) in WEIBULL_MOMENTS.items():
        assert expected_event_magnitude(g, d) == pytest.approx(m, rel=1e-13)
        assert event_variance(g, d) == pytest.approx(v, rel=1e-12)


def test_functionals_vs_monte_carlo():
    rng = np.random.default_rng(0)
    w = stats.weibull_min(math.exp(0.3), scale=math.exp(0.7)).rvs(2_000_000, random_state=rng)
    assert w.var() == pytest.approx(event_variance(0.3, 0.7), rel=0.01)
    n = rng.binomial(365, 1 / (1 + math.exp(0.4)), 200_000)
    assert n.mean() == pytest.approx(expected_wet_days(-0.4, 365), rel=0.005)


@settings(max_examples=100, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3))
def test_event_variance_nonnegative(g, d):
    assert event_variance(g, d) >= 0.0


def test_kl_identical_is_exactly_zero():
    for g, d in [(0.0, 0.0), (1.3, -0.4), (-2.0, 3.0)]:
        assert weibull_kl(WeibullLogParams(g, d), WeibullLogParams(g, d)) == 0.0


def test_kl_matches_oracle_and_quadrature():
    for (g1, d1, g2, d2), ref in KL_ORACLE:
        assert weibull_kl(WeibullLogParams(g1, d1), WeibullLogParams(g2, d2)) == pytest.approx(ref, abs=1e-12)
    # scipy quadrature on a further pair
    g1, d1, g2, d2 = 0.1, 0.5, 0.6, 0.2
    p, q = stats.weibull_min(math.exp(g1), scale=math.exp(d1)), stats.weibull_min(math.exp(g2), scale=math.exp(d2))
    num = integrate.quad(lambda w: p.pdf(w) * (p.logpdf(w) - q.logpdf(w)), 0, np.inf, limit=200)[0]
    assert weibull_kl(WeibullLogParams(g1, d1), WeibullLogParams(g2, d2)) == pytest.approx(num, abs=1e-8)


@settings(max_examples=200, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2))
def test_kl_nonnegative(g1, d1, g2, d2):
    assert weibull_kl_arrays(g1, d1, g2, d2) >= -1e-12


def test_conditional_mu_interpolates_and_reverts():
    rng = np.random.default_rng(1)
    pts = rng.uniform(-1, 1, (4, 2))
    b = _block(4, 2, 2, rng)
    m, v = conditional_mu(pts[2], b, pts)
    assert m == pytest.approx(b.mu[2], abs=1e-8)
    assert v == pytest.approx(0.0, abs=1e-8 * b.sigma2)
    m, v = conditional_mu(np.array([1e4, 1e4]), b, pts)
    assert m == pytest.approx(b.psi, abs=1e-12)
    assert v == pytest.approx(b.sigma2, rel=1e-12)


def test_conditional_mu_dense_oracle():
    rng = np.random.default_rng(2)
    pts = rng.uniform(-1, 1, (3, 2))
    b = _block(3, 2, 2, rng)
    target = np.array([0.1, -0.2])
    kp = KernelParams(b.sigma2, b.lambdas)
    K = covariance_matrix(pts, kp)
    k = cross_covariance(target, pts, kp)
    mean = b.psi + k @ np.linalg.inv(K) @ (b.mu - b.psi)
    var = b.sigma2 - k @ np.linalg.inv(K) @ k
    m, v = conditional_mu(target, b, pts)
    assert m == pytest.approx(mean, abs=1e-9)
    assert v == pytest.approx(var, abs=1e-9)
    means, vars_, clamped = conditional_mu_many(np.vstack([target, pts]), b, CorrelationCache(pts))
    assert means[0] == pytest.approx(m, abs=1e-12)
    assert np.all(vars_ >= 0)


def test_draws_concentrate_and_are_deterministic():
    rng = np.random.default_rng(3)
    pts = rng.uniform(-1, 1, (3, 2))
    blocks = [_block(3, 2, 2, rng, tau2=1e-12) for _ in range(3)]
    st_ = ChainState(*blocks, rng=rng)
    d1 = draw_parameters_at(pts[1], st_, pts, np.random.default_rng(7))
    d2 = draw_parameters_at(pts[1], st_, pts, np.random.default_rng(7))
    assert (d1.pi_star, d1.gamma_star, d1.delta_star) == (d2.pi_star, d2.gamma_star, d2.delta_star)
    assert d1.gamma_star == pytest.approx(blocks[1].mu[1], abs=1e-4)


def test_far_target_predictive_variance():
    rng = np.random.default_rng(4)
    pts = rng.uniform(-1, 1, (3, 2))
    blocks = [_block(3, 2, 2, rng) for _ in range(3)]
    st_ = ChainState(*blocks, rng=rng)
    vals = np.array([draw_parameters_at(np.array([1e3, 1e3]), st_, pts, rng).pi_star
                     for _ in range(20_000)])
    # far away the GP forgets the stations: pi* ~ N(psi, sigma2 + tau2)
    assert vals.mean() == pytest.approx(blocks[0].psi, abs=0.05)
    assert vals.var() == pytest.approx(blocks[0].sigma2 + blocks[0].tau2, rel=0.05)


def test_constant_chain_gives_zero_width_bands_and_ordering():
    rng = np.random.default_rng(5)
    pts = rng.uniform(-1, 1, (3, 2))
    blocks = [_block(3, 2, 2, rng, tau2=1e-300) for _ in range(3)]
    row = ChainState(*blocks, rng=rng).to_vector()
    draws = np.tile(row, (20, 1))
    g = forecast_functional_grid(draws, "semiparametric", pts, 3, 2, pts, "event-mean", seed=1)
    np.testing.assert_allclose(g.q05, g.q95, rtol=1e-6)
    grid = regular_grid(4)
    g = forecast_functional_grid(draws, "semiparametric", pts, 3, 2, grid, "annual-mean", seed=1)
    assert np.all(g.q05 <= g.median) and np.all(g.median <= g.q95)


def test_functional_names():
    with pytest.raises(ValueError):
        functional_values("nope", 0, 0, 0)
    with pytest.raises(ValueError):
        functional_values("kl-vs-truth", 0, 0, 0)
    assert functional_values("wet-days", 0.0, 0, 0, 100) == 50.0


def test_grid_is_independent_of_target_count():
    rng = np.random.default_rng(6)
    pts = rng.uniform(-1, 1, (3, 2))
    row = ChainState(*[_block(3, 2, 2, rng) for _ in range(3)], rng=rng).to_vector()
    draws = np.tile(row, (5, 1))
    grid = regular_grid(8)
    a = predictive_parameters(draws, "semiparametric", pts, 3, 2, grid, seed=3)
    b = predictive_parameters(draws, "semiparametric", pts, 3, 2, grid, seed=3)
    np.testing.assert_array_equal(a[1], b[1])


def test_regular_grid_centres():
    g = regular_grid(2)
    np.testing.assert_allclose(g, [[-0.5, -0.5], [0.5, -0.5], [-0.5, 0.5], [0.5, 0.5]])


def test_event_mean_tracks_station_means():
    rng = np.random.default_rng(7)
    M, T = 10, 3
    pts = rng.uniform(-1, 1, (M, 2))
    delta = np.repeat((1.5 * pts[:, 0])[:, None], T, axis=1)
    gamma = np.full((M, T), 0.4)
    data = simulate_observations(pts, np.zeros((M, T)), gamma, delta, rng,
                                 counts=np.full((M, T), 60), n_trials=365)
    res = run_chain("semiparametric", data, SamplerConfig(600, 200, seed=1, update_counts=False))
    g = forecast_functional_grid(res.draws, "semiparametric", pts, M, T, pts, "event-mean", seed=2)
    emp = [np.exp(data.log_magnitudes[data.cell_index // T == m]).mean() for m in range(M)]
    assert stats.spearmanr(g.median, emp).statistic > 0.8

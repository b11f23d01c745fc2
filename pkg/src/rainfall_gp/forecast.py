"""Posterior-predictive parameters at unobserved points and rainfall functionals.

Targets are forecast marginally: each pixel gets its own draw of the GP value
given the station values, with no joint covariance across pixels.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import expit, gammaln

from .distributions import EULER_GAMMA, WeibullLogParams
from .kernel import CorrelationCache, cross_covariance, KernelParams
from .model import (
    ChainState,
    DEFAULT_N_TRIALS,
    GpBlockState,
    LinearBlockState,
    LinearModelState,
    design_matrix,
)
from .seeds import derive_seed

# targets are processed in fixed-size chunks so random streams do not depend
# on how many pixels a grid has in total
TARGET_CHUNK = 1024
CLAMP_WARN_RATE = 1e-3


@dataclass(frozen=True)
class ForecastDraw:
    point: np.ndarray
    pi_star: float
    gamma_star: float
    delta_star: float
    iteration: int = 0


@dataclass
class FunctionalGrid:
    points: np.ndarray
    median: np.ndarray
    q05: np.ndarray
    q95: np.ndarray
    functional: str
    n_draws: int
    n_clamped: int = 0


# ---------------------------------------------------------------------------
# closed-form functionals

def expected_event_magnitude(gamma, delta):
    """Mean of a Weibull with shape ``e**gamma`` and scale ``e**delta``."""
    out = np.exp(np.asarray(delta, dtype=float) + gammaln(1.0 + np.exp(-np.asarray(gamma, dtype=float))))
    return float(out) if out.ndim == 0 else out


def event_variance(gamma, delta):
    inv_k = np.exp(-np.asarray(gamma, dtype=float))
    g1 = gammaln(1.0 + inv_k)
    g2 = gammaln(1.0 + 2.0 * inv_k)
    # exp(g2) - exp(2 g1) written as a factored difference to limit cancellation
    out = np.exp(2.0 * np.asarray(delta, dtype=float) + g2) * -np.expm1(2.0 * g1 - g2)
    out = np.maximum(out, 0.0)
    return float(out) if out.ndim == 0 else out


def expected_wet_days(pi, n_trials=DEFAULT_N_TRIALS):
    out = n_trials * expit(np.asarray(pi, dtype=float))
    return float(out) if np.ndim(out) == 0 else out


def expected_annual(pi, gamma, delta, n_trials=DEFAULT_N_TRIALS):
    """Expected yearly total: wet-day probability times trials times event mean."""
    out = expected_wet_days(pi, n_trials) * expected_event_magnitude(gamma, delta)
    return float(out) if np.ndim(out) == 0 else out


def weibull_kl_arrays(gamma_true, delta_true, gamma_est, delta_est):
    """KL(true || estimate) between Weibull laws given log shape / log scale."""
    g1 = np.asarray(gamma_true, dtype=float)
    d1 = np.asarray(delta_true, dtype=float)
    g2 = np.asarray(gamma_est, dtype=float)
    d2 = np.asarray(delta_est, dtype=float)
    ratio = np.exp(g2 - g1)  # k2 / k1
    k2 = np.exp(g2)
    with np.errstate(over="ignore"):
        tail = np.exp(k2 * (d1 - d2) + gammaln(1.0 + ratio))
    return g1 - g2 + k2 * (d2 - d1) - EULER_GAMMA * (1.0 - ratio) + tail - 1.0


def weibull_kl(true_params: WeibullLogParams, est_params: WeibullLogParams) -> float:
    return float(weibull_kl_arrays(true_params.gamma, true_params.delta,
                                   est_params.gamma, est_params.delta))


# ---------------------------------------------------------------------------
# GP conditionals

def conditional_mu_many(targets, block: GpBlockState, cache: CorrelationCache) -> tuple:
    """Conditional mean and variance of the GP at each target given ``block.mu``.

    Returns ``(mean, var, n_clamped)``; rounding can push a variance slightly
    below zero, in which case it is clamped to 0 and counted.
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    chol = cache.factor(block.lambdas)
    r_star = cross_covariance(targets, cache.points, KernelParams(1.0, block.lambdas))
    V = chol.solve_lower(r_star.T)
    a = chol.solve_lower(block.mu - block.psi)
    mean = block.psi + V.T @ a
    var = block.sigma2 * (1.0 - np.sum(V * V, axis=0))
    clamped = var < 0
    return mean, np.where(clamped, 0.0, var), int(clamped.sum())


def conditional_mu(target, block: GpBlockState, points_or_cache) -> tuple:
    cache = points_or_cache if isinstance(points_or_cache, CorrelationCache) else CorrelationCache(points_or_cache)
    mean, var, _ = conditional_mu_many(np.asarray(target, dtype=float)[None, :], block, cache)
    return float(mean[0]), float(var[0])


def forecast_block(targets, block, cache_or_design, rng: np.random.Generator) -> tuple:
    """One predictive draw of the year-level parameter at every target.

    Works for GP blocks (``cache_or_design`` is a correlation cache) and for
    linear blocks (targets are raw covariates; the design is built here).
    Returns ``(values, n_clamped)``.
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    n = targets.shape[0]
    if isinstance(block, LinearBlockState):
        mean = design_matrix(targets) @ block.beta
        return mean + math.sqrt(block.tau2) * rng.standard_normal(n), 0
    m, v, n_clamped = conditional_mu_many(targets, block, cache_or_design)
    mu_star = m + np.sqrt(v) * rng.standard_normal(n)
    return mu_star + math.sqrt(block.tau2) * rng.standard_normal(n), n_clamped


def draw_parameters_at(target, state, points, rng: np.random.Generator) -> ForecastDraw:
    target = np.asarray(target, dtype=float)
    cache = CorrelationCache(points) if isinstance(state, ChainState) else None
    vals = []
    for block in state.blocks():
        v, _ = forecast_block(target[None, :], block, cache, rng)
        vals.append(float(v[0]))
    return ForecastDraw(target, *vals, iteration=state.iteration)


# ---------------------------------------------------------------------------
# grids over stored draws

FUNCTIONALS = ("event-mean", "event-variance", "annual-mean", "wet-days", "kl-vs-truth")


def functional_values(name: str, pi, gamma, delta, n_trials=DEFAULT_N_TRIALS, truth=None):
    if name == "event-mean":
        return expected_event_magnitude(gamma, delta)
    if name == "event-variance":
        return event_variance(gamma, delta)
    if name == "annual-mean":
        return expected_annual(pi, gamma, delta, n_trials)
    if name == "wet-days":
        return expected_wet_days(pi, n_trials)
    if name == "kl-vs-truth":
        if truth is None:
            raise ValueError("kl-vs-truth needs the true (gamma, delta) at each target")
        return weibull_kl_arrays(truth[0], truth[1], gamma, delta)
    raise ValueError(f"unknown functional {name!r}; choose from {', '.join(FUNCTIONALS)}")


def predictive_parameters(draws: np.ndarray, model: str, points, M: int, T: int,
                          targets, seed: int, on_draw: Optional[Callable] = None) -> tuple:
    """Predictive (pi, gamma, delta) arrays of shape ``(n_draws, n_targets)``.

    The random stream of draw ``i`` and target chunk ``c`` is seeded from
    ``(seed, i, c)`` only.
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    points = np.asarray(points, dtype=float)
    p = points.shape[1]
    n_draws, n_targets = draws.shape[0], targets.shape[0]
    out = np.empty((3, n_draws, n_targets))
    caches = [CorrelationCache(points, maxsize=1) for _ in range(3)]
    n_clamped = 0
    for i in range(n_draws):
        if model == "semiparametric":
            state = ChainState.from_vector(draws[i], M, T, p)
        elif model == "parametric":
            state = LinearModelState.from_vector(draws[i], M, T, p)
        else:
            raise ValueError(f"unknown model {model!r}")
        for c, start in enumerate(range(0, n_targets, TARGET_CHUNK)):
            rng = np.random.default_rng(derive_seed(seed, i, c))
            chunk = targets[start:start + TARGET_CHUNK]
            for b, block in enumerate(state.blocks()):
                vals, nc = forecast_block(chunk, block, caches[b], rng)
                out[b, i, start:start + chunk.shape[0]] = vals
                n_clamped += nc
        if on_draw is not None:
            on_draw(i)
    return out[0], out[1], out[2], n_clamped


def summarize(values: np.ndarray) -> tuple:
    q05, med, q95 = np.quantile(values, [0.05, 0.5, 0.95], axis=0)
    return med, q05, q95


def forecast_functional_grid(draws: np.ndarray, model: str, points, M: int, T: int,
                             targets, functional: str, seed: int = 0,
                             n_trials=DEFAULT_N_TRIALS, truth=None) -> FunctionalGrid:
    """Posterior median and 5/95% quantiles of a functional at every target."""
    if functional not in FUNCTIONALS:
        raise ValueError(f"unknown functional {functional!r}; choose from {', '.join(FUNCTIONALS)}")
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    pi, gamma, delta, n_clamped = predictive_parameters(draws, model, points, M, T, targets, seed)
    values = functional_values(functional, pi, gamma, delta, n_trials, truth)
    med, q05, q95 = summarize(values)
    total = pi.size * 3
    if total and n_clamped / total > CLAMP_WARN_RATE:
        warnings.warn(f"{n_clamped} of {total} conditional variances clamped to zero",
                      RuntimeWarning, stacklevel=2)
    return FunctionalGrid(targets, med, q05, q95, functional, draws.shape[0], n_clamped)


def regular_grid(resolution: int, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    """Pixel centres of a ``resolution x resolution`` grid over ``[lo, hi]^2``.

    Rows run over x fastest, then y.
    """
    width = (hi - lo) / resolution
    c = lo + width * (np.arange(resolution) + 0.5)
    xx, yy = np.meshgrid(c, c)
    return np.column_stack([xx.ravel(), yy.ravel()])

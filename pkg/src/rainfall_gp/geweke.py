"""Joint-distribution ("getting it right") validation of the samplers.

Two simulators target the same joint law of parameters and data:

* marginal-conditional: parameters from the prior, then data given them;
* successive-conditional: alternate one full scan with regenerating the data
  from the current parameters.

With exact conditionals both produce identical parameter marginals. Test
functions are bounded or log-transformed because the Student-t and
compound-gamma priors have infinite variance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .kernel import CorrelationCache
from .model import (
    BLOCK_NAMES,
    ChainState,
    LinearModelState,
    ObservedData,
    PriorConfig,
    sample_block_prior,
    sample_linear_block_prior,
    simulate_observations,
)
from .sampler import (
    ParametricSampler,
    SamplerConfig,
    SemiParametricSampler,
)


@dataclass(frozen=True)
class GewekeInstance:
    M: int = 3
    T: int = 2
    p: int = 2
    n_trials: int = 10
    layout_seed: int = 20240611

    def points(self) -> np.ndarray:
        return np.random.default_rng(self.layout_seed).uniform(-1.0, 1.0, (self.M, self.p))


@dataclass
class GewekeReport:
    names: list
    mean_marginal: np.ndarray
    mean_successive: np.ndarray
    z: np.ndarray
    threshold: float = 4.0

    @property
    def passed(self) -> bool:
        return bool(np.all(np.abs(self.z) < self.threshold))

    def lines(self) -> list:
        out = []
        for n, a, b, z in zip(self.names, self.mean_marginal, self.mean_successive, self.z):
            flag = "ok" if abs(z) < self.threshold else "FAIL"
            out.append(f"{n:<28s} mc={a: .5f} sc={b: .5f} z={z: .3f} {flag}")
        return out


def semiparametric_test_functions(state: ChainState) -> np.ndarray:
    vals = []
    for b in state.blocks():
        a = math.atan(b.psi)
        lt, ls, ll = math.log(b.tau2), math.log(b.sigma2), math.log(b.lambdas[0])
        vals += [a, a * a, lt, lt * lt, ls, ls * ls, ll, ll * ll,
                 math.atan(b.mu[0]), math.atan(b.field[0, 0])]
    return np.asarray(vals)


def semiparametric_names() -> list:
    base = ["atan(psi)", "atan(psi)^2", "log tau2", "(log tau2)^2", "log sigma2",
            "(log sigma2)^2", "log lambda1", "(log lambda1)^2", "atan(mu1)", "atan(field11)"]
    return [f"{b}:{f}" for b in BLOCK_NAMES for f in base]


def parametric_test_functions(state: LinearModelState) -> np.ndarray:
    vals = []
    for b in state.blocks():
        a0 = math.atan(b.beta[0])
        a1 = math.atan(b.beta[1]) if b.beta.shape[0] > 1 else 0.0
        lt = math.log(b.tau2)
        vals += [a0, a0 * a0, a1, a1 * a1, lt, lt * lt, math.atan(b.field[0, 0])]
    return np.asarray(vals)


def parametric_names() -> list:
    base = ["atan(beta0)", "atan(beta0)^2", "atan(beta1)", "atan(beta1)^2", "log tau2",
            "(log tau2)^2", "atan(field11)"]
    return [f"{b}:{f}" for b in BLOCK_NAMES for f in base]


def _prior_state(model: str, points, cache, T, priors, rng):
    if model == "semiparametric":
        blocks = [sample_block_prior(cache, T, priors, rng) for _ in BLOCK_NAMES]
        return ChainState(*blocks, rng=rng)
    blocks = [sample_linear_block_prior(points, T, priors, rng) for _ in BLOCK_NAMES]
    return LinearModelState(*blocks, rng=rng)


def _simulate(state, points, n_trials, rng) -> ObservedData:
    return simulate_observations(points, state.pi.field, state.gamma.field, state.delta.field,
                                 rng, n_trials=n_trials)


def batch_means_variance(x: np.ndarray, n_batches: int = 50) -> np.ndarray:
    """Variance of the sample mean of each column, from non-overlapping batch means."""
    n = x.shape[0] - x.shape[0] % n_batches
    bm = x[:n].reshape(n_batches, n // n_batches, -1).mean(axis=1)
    return bm.var(axis=0, ddof=1) / n_batches


def run_geweke(model: str = "semiparametric", n_draws: int = 100_000,
               instance: GewekeInstance = GewekeInstance(), seed: int = 0,
               conditionals: str = "exact", priors: PriorConfig = PriorConfig(),
               progress: Optional[Callable[[str, int], None]] = None,
               **sampler_options) -> GewekeReport:
    points = instance.points()
    cache = CorrelationCache(points)
    if model == "semiparametric":
        tf, names = semiparametric_test_functions, semiparametric_names()
    elif model == "parametric":
        tf, names = parametric_test_functions, parametric_names()
    else:
        raise ValueError(f"unknown model {model!r}")

    rng_mc = np.random.default_rng([seed, 1])
    mc = np.empty((n_draws, len(names)))
    for i in range(n_draws):
        mc[i] = tf(_prior_state(model, points, cache, instance.T, priors, rng_mc))
        if progress and i % 10000 == 0:
            progress("marginal", i)

    rng_sc = np.random.default_rng([seed, 2])
    config = SamplerConfig(n_iterations=n_draws + 1, burn_in=0, seed=seed, priors=priors,
                           conditionals=conditionals, **sampler_options)
    state = _prior_state(model, points, cache, instance.T, priors, rng_sc)
    data = _simulate(state, points, instance.n_trials, rng_sc)
    sampler = (SemiParametricSampler if model == "semiparametric" else ParametricSampler)(data, config)
    sc = np.empty((n_draws, len(names)))
    for i in range(n_draws):
        state = sampler.scan(state)
        data = _simulate(state, points, instance.n_trials, rng_sc)
        sampler.set_data(data)
        sc[i] = tf(state)
        if progress and i % 10000 == 0:
            progress("successive", i)

    m1, m2 = mc.mean(axis=0), sc.mean(axis=0)
    v1 = mc.var(axis=0, ddof=1) / n_draws
    v2 = batch_means_variance(sc)
    se = np.sqrt(v1 + v2)
    # constant test functions (e.g. a missing slope) carry no information
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, (m1 - m2) / se, np.where(m1 == m2, 0.0, np.inf))
    return GewekeReport(names, m1, m2, z)

"""Scalar densities and samplers used by the model.

Gamma and inverse-gamma distributions use the shape-rate convention:
``Ga(a, b)`` has mean ``a / b`` and ``IGa(a, b)`` has density proportional to
``x**(-a - 1) * exp(-b / x)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import betainc, gammaln, log_expit

from .errors import DomainError

EULER_GAMMA = float(np.euler_gamma)


@dataclass(frozen=True)
class WeibullLogParams:
    gamma: float  # log shape
    delta: float  # log scale

    @property
    def shape(self) -> float:
        return math.exp(self.gamma)

    @property
    def scale(self) -> float:
        return math.exp(self.delta)


@dataclass(frozen=True)
class CoGaParams:
    """Compound gamma: ``X | Z ~ IGa(k, Z)`` with ``Z ~ Ga(v, 1/scale)``."""

    v: float
    k: float
    scale: float

    def __post_init__(self):
        if not (self.v > 0 and self.k > 0 and self.scale > 0):
            raise DomainError(f"CoGa parameters must be positive: {self}")

    @property
    def rate(self) -> float:
        return 1.0 / self.scale


def weibull_logpdf_logw(log_w, gamma, delta):
    """Weibull log density evaluated from ``log w``, shape ``e**gamma``, scale ``e**delta``.

    Working from ``log w`` keeps the density finite for extreme shapes where
    ``w`` itself would under- or overflow.
    """
    z = np.asarray(log_w, dtype=float) - delta
    k = np.exp(gamma)
    return gamma - delta + (k - 1.0) * z - np.exp(k * z)


def weibull_loglik(w: float, params: WeibullLogParams) -> float:
    if not w > 0:
        raise DomainError(f"Weibull magnitude must be positive, got {w}")
    return float(weibull_logpdf_logw(math.log(w), params.gamma, params.delta))


LOG_SATURATION = 700.0


def sample_weibull_log(gamma, delta, rng: np.random.Generator, size=None):
    """Draw ``log W`` for ``W ~ Wei(e**gamma, e**delta)`` by inversion."""
    gamma = np.asarray(gamma, dtype=float)
    if size is None:
        size = np.broadcast_shapes(gamma.shape, np.shape(delta))
    g = np.log(rng.standard_exponential(size))
    # for shapes below e**-700 the draw leaves float range; saturate it there
    spread = np.exp(np.minimum(np.log(np.abs(g)) - gamma, LOG_SATURATION))
    return delta + np.sign(g) * spread


def log_sigmoid(x):
    return log_expit(x)


def binomial_logit_loglik(N, n_trials, pi, normalized: bool = True):
    """Binomial log pmf with success probability ``1 / (1 + exp(-pi))``.

    Broadcasts over array arguments. ``normalized=False`` drops the
    log binomial coefficient.
    """
    N = np.asarray(N)
    n_trials = np.asarray(n_trials)
    if np.any(N < 0) or np.any(N > n_trials):
        raise DomainError(f"count outside [0, n_trials]: N={N}, n={n_trials}")
    pi = np.asarray(pi, dtype=float)
    # 0 * log(0) terms are exactly zero, not nan
    with np.errstate(invalid="ignore"):
        out = np.where(N > 0, N * log_expit(pi), 0.0) + np.where(
            n_trials - N > 0, (n_trials - N) * log_expit(-pi), 0.0
        )
    if normalized:
        out = out + log_binomial_coefficient(n_trials, N)
    return float(out) if out.ndim == 0 else out


def log_binomial_coefficient(n, k):
    n = np.asarray(n, dtype=float)
    k = np.asarray(k, dtype=float)
    return gammaln(n + 1.0) - gammaln(k + 1.0) - gammaln(n - k + 1.0)


def coga_logpdf(x, params: CoGaParams):
    x = np.asarray(x, dtype=float)
    if np.any(~(x > 0)):
        raise DomainError("CoGa density is defined for x > 0 only")
    v, k, r = params.v, params.k, params.rate
    out = (
        gammaln(k + v)
        - gammaln(k)
        - gammaln(v)
        + v * math.log(r)
        - (k + 1.0) * np.log(x)
        - (k + v) * np.log(r + 1.0 / x)
    )
    return float(out) if out.ndim == 0 else out


def coga_pdf(x, params: CoGaParams):
    return np.exp(coga_logpdf(x, params))


def coga_cdf(x, params: CoGaParams):
    """CDF via the beta-prime representation of the compound."""
    x = np.asarray(x, dtype=float)
    # X = Z/G with Z ~ Ga(v, r), G ~ Ga(k, 1): r X ~ BetaPrime(v, k)
    y = params.rate * x
    return betainc(params.v, params.k, y / (1.0 + y))


def coga_sample(params: CoGaParams, rng: np.random.Generator, size=None):
    z = sample_gamma(params.v, params.rate, rng, size)
    return sample_inverse_gamma(params.k, z, rng, size)


def sample_gamma(shape, rate, rng: np.random.Generator, size=None):
    return rng.gamma(shape, 1.0 / np.asarray(rate, dtype=float), size)


def sample_inverse_gamma(shape, rate, rng: np.random.Generator, size=None):
    return np.asarray(rate, dtype=float) / rng.gamma(shape, 1.0, size)


def sample_lognormal(mu, sigma2, rng: np.random.Generator, size=None):
    return np.exp(mu + math.sqrt(sigma2) * rng.standard_normal(size))


def sample_normal(mean, var, rng: np.random.Generator, size=None):
    return mean + np.sqrt(var) * rng.standard_normal(size)


def inverse_gamma_logpdf(x, shape, rate):
    x = np.asarray(x, dtype=float)
    return shape * np.log(rate) - gammaln(shape) - (shape + 1.0) * np.log(x) - rate / x


def normal_logpdf(x, mean, var):
    x = np.asarray(x, dtype=float)
    return -0.5 * (np.log(2.0 * np.pi * var) + (x - mean) ** 2 / var)

"""Data containers, latent states and block log-likelihoods.

Parameters are stored per (station, year): ``field[m, j]`` is the binomial
logit, log Weibull shape or log Weibull scale of station ``m`` in year ``j``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field, replace
from typing import Optional, Sequence

import numpy as np

from . import distributions as dist
from .errors import DataError
from .kernel import CholFactor, CorrelationCache, LOG_2PI

DEFAULT_N_TRIALS = 365
BLOCK_NAMES = ("pi", "gamma", "delta")


@dataclass(frozen=True)
class PriorConfig:
    """Hyper-prior constants shared by the three GP blocks.

    ``psi ~ N(0, zeta_psi)`` with ``zeta_psi ~ IGa(zeta_psi_shape, zeta_psi_rate)``
    gives a Student-t prior on the GP mean level; variances follow
    ``CoGa(variance_v, variance_k, variance_scale)``; length scales are
    log-normal with log-mean 0.
    """

    zeta_psi_shape: float = 1.0
    zeta_psi_rate: float = 1.0
    variance_v: float = 0.5
    variance_k: float = 2.0
    variance_scale: float = 2.0
    lengthscale_logvar: float = 2.0

    @property
    def variance_coga(self) -> dist.CoGaParams:
        return dist.CoGaParams(self.variance_v, self.variance_k, self.variance_scale)

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class CovariateTransform:
    """Per-dimension affine map ``z = (x - center) / half_range`` onto [-1, 1]."""

    center: np.ndarray
    half_range: np.ndarray

    @classmethod
    def fit(cls, raw) -> "CovariateTransform":
        raw = np.asarray(raw, dtype=float)
        lo, hi = raw.min(axis=0), raw.max(axis=0)
        half = 0.5 * (hi - lo)
        # constant covariates are centered but not rescaled
        half = np.where(half > 0, half, 1.0)
        return cls(0.5 * (hi + lo), half)

    def apply(self, raw) -> np.ndarray:
        return (np.asarray(raw, dtype=float) - self.center) / self.half_range

    def invert(self, standardized) -> np.ndarray:
        return np.asarray(standardized, dtype=float) * self.half_range + self.center

    def as_dict(self) -> dict:
        return {"center": self.center.tolist(), "half_range": self.half_range.tolist()}

    @classmethod
    def from_dict(cls, d) -> "CovariateTransform":
        return cls(np.asarray(d["center"], dtype=float), np.asarray(d["half_range"], dtype=float))


@dataclass(frozen=True, eq=False)
class ObservedData:
    """Wet-day counts and event magnitudes at M stations over T years.

    Magnitudes are held as a flat array of logarithms ordered by station,
    then year, then event; ``cell_index`` maps every event to ``m * T + j``.
    """

    points: np.ndarray
    counts: np.ndarray
    log_magnitudes: np.ndarray
    n_trials: np.ndarray
    station_ids: tuple = ()
    years: tuple = ()
    transform: Optional[CovariateTransform] = None
    cell_index: np.ndarray = dc_field(init=False, repr=False)
    cell_sum_log: np.ndarray = dc_field(init=False, repr=False)

    def __post_init__(self):
        points = np.asarray(self.points, dtype=float)
        if points.ndim == 1:
            points = points[:, None]
        counts = np.asarray(self.counts)
        if counts.ndim != 2 or counts.shape[0] != points.shape[0]:
            raise DataError(f"counts shape {counts.shape} does not match {points.shape[0]} stations")
        if not np.issubdtype(counts.dtype, np.integer):
            if np.any(counts != np.round(counts)):
                raise DataError("counts must be integers")
        counts = counts.astype(np.int64)
        n_trials = np.broadcast_to(np.asarray(self.n_trials, dtype=np.int64), counts.shape).copy()
        if np.any(counts < 0) or np.any(counts > n_trials):
            raise DataError("counts must lie within [0, n_trials]")
        logw = np.asarray(self.log_magnitudes, dtype=float).ravel()
        if logw.shape[0] != counts.sum():
            raise DataError(
                f"{logw.shape[0]} magnitudes for {int(counts.sum())} counted events"
            )
        if np.any(~np.isfinite(logw)):
            raise DataError("magnitudes must be positive and finite")
        if not np.all(np.isfinite(points)):
            raise DataError("covariates must be finite")
        M, T = counts.shape
        cell_index = np.repeat(np.arange(M * T), counts.ravel())
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "n_trials", n_trials)
        object.__setattr__(self, "log_magnitudes", logw)
        object.__setattr__(self, "cell_index", cell_index)
        object.__setattr__(
            self, "cell_sum_log", np.bincount(cell_index, weights=logw, minlength=M * T)
        )
        if not self.station_ids:
            object.__setattr__(self, "station_ids", tuple(f"s{m:03d}" for m in range(M)))
        if not self.years:
            object.__setattr__(self, "years", tuple(range(1, T + 1)))
        if len(self.station_ids) != M or len(self.years) != T:
            raise DataError("station_ids / years do not match the counts shape")

    @classmethod
    def from_magnitudes(cls, points, magnitudes: Sequence[Sequence[Sequence[float]]],
                        n_trials=DEFAULT_N_TRIALS, **kwargs) -> "ObservedData":
        """Build from a nested ``magnitudes[m][j] -> list of event sizes`` structure."""
        counts = np.array([[len(cell) for cell in row] for row in magnitudes], dtype=np.int64)
        flat = [w for row in magnitudes for cell in row for w in cell]
        w = np.asarray(flat, dtype=float)
        if np.any(~(w > 0)):
            raise DataError("magnitudes must be positive")
        return cls(points, counts, np.log(w), n_trials, **kwargs)

    @property
    def M(self) -> int:
        return self.counts.shape[0]

    @property
    def T(self) -> int:
        return self.counts.shape[1]

    @property
    def p(self) -> int:
        return self.points.shape[1]

    @property
    def n_events(self) -> int:
        return int(self.log_magnitudes.shape[0])

    def magnitudes_at(self, m: int, j: int) -> np.ndarray:
        cell = m * self.T + j
        start = int(self.counts.ravel()[:cell].sum())
        return np.exp(self.log_magnitudes[start:start + self.counts[m, j]])

    @property
    def magnitudes(self) -> list:
        out, start = [], 0
        for m in range(self.M):
            row = []
            for j in range(self.T):
                n = int(self.counts[m, j])
                row.append(np.exp(self.log_magnitudes[start:start + n]))
                start += n
            out.append(row)
        return out


@dataclass(frozen=True)
class GpBlockState:
    psi: float
    mu: np.ndarray
    field: np.ndarray
    tau2: float
    sigma2: float
    lambdas: np.ndarray
    zeta_psi: float
    zeta_tau2: float
    zeta_sigma2: float

    SCALARS = ("psi", "tau2", "sigma2", "zeta_psi", "zeta_tau2", "zeta_sigma2")

    def replace(self, **changes) -> "GpBlockState":
        return replace(self, **changes)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([
            [getattr(self, k) for k in self.SCALARS], self.lambdas, self.mu, self.field.ravel()
        ])

    @classmethod
    def from_vector(cls, vec, M: int, T: int, p: int) -> "GpBlockState":
        vec = np.asarray(vec, dtype=float)
        scalars = dict(zip(cls.SCALARS, (float(v) for v in vec[:6])))
        i = 6
        lambdas = vec[i:i + p].copy(); i += p
        mu = vec[i:i + M].copy(); i += M
        field = vec[i:i + M * T].reshape(M, T).copy()
        return cls(mu=mu, field=field, lambdas=lambdas, **scalars)

    @staticmethod
    def vector_names(prefix: str, M: int, T: int, p: int) -> list:
        names = [f"{prefix}.{k}" for k in GpBlockState.SCALARS]
        names += [f"{prefix}.lambda{h + 1}" for h in range(p)]
        names += [f"{prefix}.mu{m + 1}" for m in range(M)]
        names += [f"{prefix}.field{m + 1}_{j + 1}" for m in range(M) for j in range(T)]
        return names


@dataclass
class ChainState:
    """Full semi-parametric state. The generator is consumed by each scan."""

    pi: GpBlockState
    gamma: GpBlockState
    delta: GpBlockState
    rng: np.random.Generator
    iteration: int = 0

    def blocks(self) -> tuple:
        return (self.pi, self.gamma, self.delta)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([b.to_vector() for b in self.blocks()])

    @staticmethod
    def vector_names(M: int, T: int, p: int) -> list:
        return [n for b in BLOCK_NAMES for n in GpBlockState.vector_names(b, M, T, p)]

    @classmethod
    def from_vector(cls, vec, M, T, p, rng=None, iteration=0) -> "ChainState":
        width = 6 + p + M + M * T
        blocks = [GpBlockState.from_vector(vec[i * width:(i + 1) * width], M, T, p) for i in range(3)]
        return cls(*blocks, rng=rng if rng is not None else np.random.default_rng(0),
                   iteration=iteration)


@dataclass(frozen=True)
class LinearBlockState:
    """One block of the parametric competitor: ``field = X beta + noise``."""

    beta: np.ndarray
    zeta_beta: np.ndarray
    tau2: float
    zeta_tau2: float
    field: np.ndarray

    def replace(self, **changes) -> "LinearBlockState":
        return replace(self, **changes)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([[self.tau2, self.zeta_tau2], self.beta, self.zeta_beta,
                               self.field.ravel()])

    @classmethod
    def from_vector(cls, vec, M, T, p) -> "LinearBlockState":
        q = p + 1
        vec = np.asarray(vec, dtype=float)
        return cls(beta=vec[2:2 + q].copy(), zeta_beta=vec[2 + q:2 + 2 * q].copy(),
                   tau2=float(vec[0]), zeta_tau2=float(vec[1]),
                   field=vec[2 + 2 * q:2 + 2 * q + M * T].reshape(M, T).copy())

    @staticmethod
    def vector_names(prefix, M, T, p) -> list:
        q = p + 1
        return ([f"{prefix}.tau2", f"{prefix}.zeta_tau2"]
                + [f"{prefix}.beta{h}" for h in range(q)]
                + [f"{prefix}.zeta_beta{h}" for h in range(q)]
                + [f"{prefix}.field{m + 1}_{j + 1}" for m in range(M) for j in range(T)])


@dataclass
class LinearModelState:
    pi: LinearBlockState
    gamma: LinearBlockState
    delta: LinearBlockState
    rng: np.random.Generator
    iteration: int = 0

    def blocks(self) -> tuple:
        return (self.pi, self.gamma, self.delta)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([b.to_vector() for b in self.blocks()])

    @staticmethod
    def vector_names(M, T, p) -> list:
        return [n for b in BLOCK_NAMES for n in LinearBlockState.vector_names(b, M, T, p)]

    @classmethod
    def from_vector(cls, vec, M, T, p, rng=None, iteration=0) -> "LinearModelState":
        width = 2 + 2 * (p + 1) + M * T
        blocks = [LinearBlockState.from_vector(vec[i * width:(i + 1) * width], M, T, p)
                  for i in range(3)]
        return cls(*blocks, rng=rng if rng is not None else np.random.default_rng(0),
                   iteration=iteration)


def design_matrix(points) -> np.ndarray:
    """Intercept column followed by the covariates."""
    x = np.asarray(points, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return np.hstack([np.ones((x.shape[0], 1)), x])


# ---------------------------------------------------------------------------
# likelihoods

def loglik_counts(data: ObservedData, pi_field, normalized: bool = True) -> float:
    pi_field = np.asarray(pi_field, dtype=float)
    return float(np.sum(dist.binomial_logit_loglik(
        data.counts, data.n_trials, pi_field, normalized=normalized)))


def loglik_magnitudes(data: ObservedData, gamma_field, delta_field) -> float:
    if data.n_events == 0:
        return 0.0
    g = np.asarray(gamma_field, dtype=float).ravel()
    d = np.asarray(delta_field, dtype=float).ravel()
    n = data.counts.ravel()
    k = np.exp(g)
    # per-cell closed sums, plus the one term that needs every event
    cell_terms = n * (g - d) + (k - 1.0) * (data.cell_sum_log - n * d)
    idx = data.cell_index
    with np.errstate(over="ignore", invalid="ignore"):
        tail = np.exp(k[idx] * (data.log_magnitudes - d[idx])).sum()
        return float(cell_terms.sum() - tail)


def loglik_magnitudes_cells(data: ObservedData, gamma_flat, delta_flat) -> np.ndarray:
    """Weibull log-likelihood of each cell (length ``M*T``); cells without events give 0."""
    g = np.asarray(gamma_flat, dtype=float)
    d = np.asarray(delta_flat, dtype=float)
    n = data.counts.ravel()
    k = np.exp(g)
    idx = data.cell_index
    with np.errstate(over="ignore", invalid="ignore"):
        cell_terms = np.where(n > 0, n * (g - d) + (k - 1.0) * (data.cell_sum_log - n * d), 0.0)
        tail = np.bincount(idx, weights=np.exp(k[idx] * (data.log_magnitudes - d[idx])),
                           minlength=n.shape[0])
        out = cell_terms - tail
    return np.where(np.isnan(out), -np.inf, out)


def log_joint_gaussian_prior(block: GpBlockState, points_or_cache) -> float:
    """log N(psi; 0, zeta_psi) + log N(mu; psi 1, K) + sum log N(field; mu, tau2)."""
    cache = _as_cache(points_or_cache)
    chol = cache.factor(block.lambdas).scaled(block.sigma2)
    resid = block.mu - block.psi
    z = chol.solve_lower(resid)
    M = block.mu.shape[0]
    lp_psi = -0.5 * (LOG_2PI + math.log(block.zeta_psi) + block.psi ** 2 / block.zeta_psi)
    lp_mu = -0.5 * M * LOG_2PI - 0.5 * chol.logdet() - 0.5 * float(z @ z)
    e = block.field - block.mu[:, None]
    lp_field = -0.5 * (e.size * (LOG_2PI + math.log(block.tau2)) + float(np.sum(e * e)) / block.tau2)
    return lp_psi + lp_mu + lp_field


def _as_cache(points_or_cache) -> CorrelationCache:
    if isinstance(points_or_cache, CorrelationCache):
        return points_or_cache
    return CorrelationCache(points_or_cache)


# ---------------------------------------------------------------------------
# forward simulation

def sample_block_prior(points_or_cache, T: int, priors: PriorConfig,
                       rng: np.random.Generator) -> GpBlockState:
    """Draw one GP block from its hierarchical prior."""
    cache = _as_cache(points_or_cache)
    M, p = cache.points.shape
    zeta_psi = float(dist.sample_inverse_gamma(priors.zeta_psi_shape, priors.zeta_psi_rate, rng))
    psi = float(dist.sample_normal(0.0, zeta_psi, rng))
    coga = priors.variance_coga
    zeta_tau2 = float(dist.sample_gamma(coga.v, coga.rate, rng))
    tau2 = float(dist.sample_inverse_gamma(coga.k, zeta_tau2, rng))
    zeta_sigma2 = float(dist.sample_gamma(coga.v, coga.rate, rng))
    sigma2 = float(dist.sample_inverse_gamma(coga.k, zeta_sigma2, rng))
    lambdas = dist.sample_lognormal(0.0, priors.lengthscale_logvar, rng, size=p)
    chol = cache.factor(lambdas)
    mu = psi + math.sqrt(sigma2) * (chol.lower @ rng.standard_normal(M))
    field = mu[:, None] + math.sqrt(tau2) * rng.standard_normal((M, T))
    return GpBlockState(psi=psi, mu=mu, field=field, tau2=tau2, sigma2=sigma2,
                        lambdas=lambdas, zeta_psi=zeta_psi, zeta_tau2=zeta_tau2,
                        zeta_sigma2=zeta_sigma2)


def sample_linear_block_prior(points, T: int, priors: PriorConfig,
                              rng: np.random.Generator) -> LinearBlockState:
    X = design_matrix(points)
    q = X.shape[1]
    zeta_beta = dist.sample_inverse_gamma(priors.zeta_psi_shape, priors.zeta_psi_rate, rng, size=q)
    beta = np.sqrt(zeta_beta) * rng.standard_normal(q)
    coga = priors.variance_coga
    zeta_tau2 = float(dist.sample_gamma(coga.v, coga.rate, rng))
    tau2 = float(dist.sample_inverse_gamma(coga.k, zeta_tau2, rng))
    field = (X @ beta)[:, None] + math.sqrt(tau2) * rng.standard_normal((X.shape[0], T))
    return LinearBlockState(beta=beta, zeta_beta=zeta_beta, tau2=tau2,
                            zeta_tau2=zeta_tau2, field=field)


def simulate_observations(points, pi_field, gamma_field, delta_field,
                          rng: np.random.Generator, n_trials=DEFAULT_N_TRIALS,
                          counts=None, **kwargs) -> ObservedData:
    """Draw counts (unless given) and log-magnitudes from the observation model."""
    gamma_field = np.asarray(gamma_field, dtype=float)
    delta_field = np.asarray(delta_field, dtype=float)
    if counts is None:
        n = np.broadcast_to(np.asarray(n_trials, dtype=np.int64), np.shape(pi_field))
        prob = 1.0 / (1.0 + np.exp(-np.asarray(pi_field, dtype=float)))
        counts = rng.binomial(n, prob)
    counts = np.asarray(counts, dtype=np.int64)
    flat = counts.ravel()
    g = np.repeat(gamma_field.ravel(), flat)
    d = np.repeat(delta_field.ravel(), flat)
    logw = dist.sample_weibull_log(g, d, rng)
    return ObservedData(points, counts, logw, n_trials, **kwargs)

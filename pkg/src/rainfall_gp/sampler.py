"""Gibbs and elliptical-slice updates for the semi-parametric and linear models.

One scan of the semi-parametric sampler runs, for the blocks pi, gamma and
delta in that order:

1. scale latents ``zeta_psi``, ``zeta_tau2``, ``zeta_sigma2`` (Gibbs),
2. white-noise variance ``tau2`` and GP variance ``sigma2`` (Gibbs),
3. length scales on the log scale (elliptical slice),
4. the Gaussian hierarchy ``(psi, mu, field)`` against the counts, then the
   gamma and delta hierarchies jointly against the magnitudes (elliptical
   slice, one shared angle).

Optional extra moves follow, each leaving the posterior unchanged: per-cell
elliptical slice moves on the fields, conjugate Gibbs draws of ``mu`` and
``psi``, a slice move on ``log tau2`` with whitened residuals fixed, and two
slice moves on ``sigma2`` (non-centered, and jointly with the length scales).
They are on by default; see :class:`SamplerConfig`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.special import log_expit

from . import distributions as dist
from .errors import SamplerError, SingularMatrixError
from .kernel import CorrelationCache
from .model import (
    ChainState,
    GpBlockState,
    LinearBlockState,
    LinearModelState,
    ObservedData,
    PriorConfig,
    design_matrix,
    loglik_magnitudes,
    loglik_magnitudes_cells,
)

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class SamplerConfig:
    n_iterations: int = 2000
    burn_in: int = 500
    thin: int = 1
    seed: int = 0
    priors: PriorConfig = PriorConfig()
    max_shrinks: int = 1000
    # False drops the binomial layer (counts treated as fixed constants)
    update_counts: bool = True
    # "printed" swaps in the unmodified step-2 forms; used only to show the
    # sampler validation detects them
    conditionals: str = "exact"
    # "data" starts fields at per-cell estimates, "prior" at zero
    init: str = "data"
    # extra conjugate Gibbs moves for mu, psi (and beta); they leave the
    # posterior unchanged and stop psi from sticking when fields are well
    # identified
    centered_moves: bool = True
    # slice move on log tau2 with whitened residuals held fixed; removes the
    # funnel between tau2 and the fields when the data are weak
    interweave: bool = True
    # per-cell elliptical slice moves on the fields (cells are independent
    # given mu and tau2), for likelihoods whose curvature varies between cells
    cellwise_moves: bool = True
    # slice moves on sigma2: one with whitened mu residuals held fixed and one
    # along the ridge sigma2 ~ lambda^3 that the data identify for Matern-3/2
    scale_moves: bool = True

    def __post_init__(self):
        if self.n_iterations < 1 or self.thin < 1:
            raise ValueError("n_iterations and thin must be >= 1")
        if not 0 <= self.burn_in < self.n_iterations:
            raise ValueError("burn_in must satisfy 0 <= burn_in < n_iterations")
        if self.max_shrinks < 1:
            raise ValueError("max_shrinks must be >= 1")
        if self.conditionals not in ("exact", "printed"):
            raise ValueError(f"unknown conditionals mode {self.conditionals!r}")
        if self.init not in ("data", "prior"):
            raise ValueError(f"unknown init mode {self.init!r}")

    @property
    def n_stored(self) -> int:
        return (self.n_iterations - self.burn_in) // self.thin

    def is_stored(self, iteration: int) -> bool:
        """Whether the state after scan number ``iteration`` (1-based) is kept."""
        return iteration > self.burn_in and (iteration - self.burn_in) % self.thin == 0

    def as_dict(self) -> dict:
        return {
            "n_iterations": self.n_iterations, "burn_in": self.burn_in, "thin": self.thin,
            "seed": self.seed, "priors": self.priors.as_dict(), "max_shrinks": self.max_shrinks,
            "update_counts": self.update_counts, "conditionals": self.conditionals,
            "init": self.init, "centered_moves": self.centered_moves,
            "interweave": self.interweave, "cellwise_moves": self.cellwise_moves,
            "scale_moves": self.scale_moves,
        }


@dataclass
class EssOutcome:
    state: np.ndarray
    n_shrinks: int
    angle: float
    loglik: float


@dataclass
class ScanInfo:
    """Per-scan diagnostics handed to progress callbacks."""

    iteration: int
    shrinks: dict = dc_field(default_factory=dict)
    loglik_counts: float = float("nan")
    loglik_magnitudes: float = float("nan")
    # ESS-updated coordinates exactly equal to their previous value
    n_repeats: int = 0


# ---------------------------------------------------------------------------
# conjugate updates

def gibbs_zeta_psi(psi: float, rng: np.random.Generator, priors: PriorConfig = PriorConfig()) -> float:
    return float(dist.sample_inverse_gamma(priors.zeta_psi_shape + 0.5,
                                           priors.zeta_psi_rate + 0.5 * psi * psi, rng))


def gibbs_zeta_variance(var: float, rng: np.random.Generator, priors: PriorConfig = PriorConfig()) -> float:
    coga = priors.variance_coga
    return float(dist.sample_gamma(coga.v + coga.k, coga.rate + 1.0 / var, rng))


def tau2_conditional(block: GpBlockState, priors: PriorConfig = PriorConfig()) -> tuple:
    """Shape and rate of the inverse-gamma full conditional of ``tau2``."""
    e = block.field - block.mu[:, None]
    return priors.variance_k + 0.5 * e.size, block.zeta_tau2 + 0.5 * float(np.sum(e * e))


def sigma2_conditional(block: GpBlockState, cache: CorrelationCache,
                       priors: PriorConfig = PriorConfig()) -> tuple:
    """Shape and rate of the inverse-gamma full conditional of ``sigma2``.

    The rate uses the quadratic form of ``mu - psi`` under the unit-amplitude
    correlation matrix at the current length scales.
    """
    z = cache.factor(block.lambdas).solve_lower(block.mu - block.psi)
    return priors.variance_k + 0.5 * z.size, block.zeta_sigma2 + 0.5 * float(z @ z)


def gibbs_tau2(block: GpBlockState, rng: np.random.Generator,
               priors: PriorConfig = PriorConfig()) -> float:
    shape, rate = tau2_conditional(block, priors)
    return float(dist.sample_inverse_gamma(shape, rate, rng))


def gibbs_sigma2(block: GpBlockState, cache: CorrelationCache, rng: np.random.Generator,
                 priors: PriorConfig = PriorConfig()) -> float:
    shape, rate = sigma2_conditional(block, cache, priors)
    return float(dist.sample_inverse_gamma(shape, rate, rng))


def gibbs_mu(block: GpBlockState, cache: CorrelationCache, rng: np.random.Generator) -> np.ndarray:
    """Draw ``mu`` given the field rows, ``psi`` and the GP hyperparameters.

    Uses the prior-then-correct form: with ``K = sigma2 R`` and noise
    ``D = tau2 / T``, ``mu = u + K (K + D I)^-1 (fbar - u - e)`` where
    ``u ~ N(psi, K)`` and ``e ~ N(0, D I)``.
    """
    M, T = block.field.shape
    chol = cache.factor(block.lambdas)
    L = math.sqrt(block.sigma2) * chol.lower
    K = L @ L.T
    noise = block.tau2 / T
    u = block.psi + L @ rng.standard_normal(M)
    e = math.sqrt(noise) * rng.standard_normal(M)
    A = K + noise * np.eye(M)
    resid = block.field.mean(axis=1) - u - e
    return u + K @ cho_solve(cho_factor(A, lower=True, check_finite=False), resid, check_finite=False)


def gibbs_psi(block: GpBlockState, cache: CorrelationCache, rng: np.random.Generator) -> float:
    """Draw ``psi`` given ``mu ~ N(psi 1, sigma2 R)`` and ``psi ~ N(0, zeta_psi)``."""
    chol = cache.factor(block.lambdas)
    a = chol.solve_lower(np.ones(block.mu.shape[0]))
    b = chol.solve_lower(block.mu)
    prec = 1.0 / block.zeta_psi + float(a @ a) / block.sigma2
    mean = float(a @ b) / block.sigma2 / prec
    return mean + rng.standard_normal() / math.sqrt(prec)


def gibbs_beta(block: LinearBlockState, X: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Conjugate draw of the regression coefficients given the field."""
    T = block.field.shape[1]
    prec = np.diag(1.0 / block.zeta_beta) + (T / block.tau2) * (X.T @ X)
    rhs = (T / block.tau2) * (X.T @ block.field.mean(axis=1))
    c = cho_factor(prec, lower=True, check_finite=False)
    mean = cho_solve(c, rhs, check_finite=False)
    z = rng.standard_normal(X.shape[1])
    # prec = L L^T, so L^-T z has covariance prec^-1
    return mean + solve_triangular(c[0], z, lower=True, trans="T", check_finite=False)


def _printed_variance_updates(block: GpBlockState, rng, priors: PriorConfig) -> tuple:
    # the step-2 forms exactly as printed: tau2 against psi - mu, sigma2
    # against mu - field without the correlation matrix
    k = priors.variance_k
    M, T = block.field.shape
    r_tau = block.zeta_tau2 + 0.5 * float(np.sum((block.psi - block.mu) ** 2))
    tau2 = float(dist.sample_inverse_gamma(k + 0.5 * M, r_tau, rng))
    r_sig = block.zeta_sigma2 + 0.5 * float(np.sum((block.mu[:, None] - block.field) ** 2))
    sigma2 = float(dist.sample_inverse_gamma(k + 0.5 * M * T, r_sig, rng))
    return tau2, sigma2


# ---------------------------------------------------------------------------
# elliptical slice sampling

def ess_generic(current: np.ndarray, prior_draw: Callable, loglik: Callable,
                rng: np.random.Generator, max_shrinks: int = 1000,
                current_loglik: Optional[float] = None) -> EssOutcome:
    """One elliptical slice update for a zero-mean Gaussian prior times ``exp(loglik)``.

    ``prior_draw(rng)`` returns a fresh draw from the prior. A proposal whose
    log-likelihood is nan or -inf is shrunk away from like any other
    rejection. A collapsed bracket returns the current point.
    """
    current = np.asarray(current, dtype=float)
    angle = rng.uniform(0.0, TWO_PI)
    lo, hi = angle - TWO_PI, angle
    log_u = math.log(rng.uniform())
    if current_loglik is None:
        current_loglik = loglik(current)
    threshold = current_loglik + log_u
    nu = prior_draw(rng)
    for n_shrinks in range(max_shrinks + 1):
        proposal = current * math.cos(angle) + nu * math.sin(angle)
        ll = loglik(proposal)
        if ll >= threshold:
            return EssOutcome(proposal, n_shrinks, angle, ll)
        if angle < 0.0:
            lo = angle
        else:
            hi = angle
        if not lo < 0.0 < hi:
            raise SamplerError(f"angle bracket ({lo}, {hi}) no longer contains 0")
        if hi - lo <= 1e-12:
            # target too steep to resolve in floating point: stay put
            return EssOutcome(current, n_shrinks, 0.0, current_loglik)
        angle = rng.uniform(lo, hi)
    raise SamplerError(
        f"elliptical slice exceeded {max_shrinks} shrinks; likelihood and prior are inconsistent"
    )


def lengthscale_loglik(block: GpBlockState, cache: CorrelationCache) -> Callable:
    """Log density of ``mu`` given ``psi, sigma2`` as a function of log length scales."""
    resid = block.mu - block.psi
    M = resid.shape[0]
    half_m_log_s2 = 0.5 * M * math.log(block.sigma2)

    def loglik(log_lambdas):
        try:
            chol = cache.factor(np.exp(log_lambdas))
        except SingularMatrixError:
            return -math.inf
        z = chol.solve_lower(resid)
        return (-half_m_log_s2 - float(np.sum(np.log(np.diag(chol.lower))))
                - 0.5 * float(z @ z) / block.sigma2)

    return loglik


def ess_lengthscales(block: GpBlockState, cache: CorrelationCache, rng: np.random.Generator,
                     priors: PriorConfig = PriorConfig(), max_shrinks: int = 1000) -> EssOutcome:
    """Update length scales with an elliptical slice step on ``log lambda``.

    The returned outcome's ``state`` holds the new length scales (not logs).
    """
    sd = math.sqrt(priors.lengthscale_logvar)
    p = block.lambdas.shape[0]
    out = ess_generic(np.log(block.lambdas), lambda g: sd * g.standard_normal(p),
                      lengthscale_loglik(block, cache), rng, max_shrinks)
    out.state = np.exp(out.state)
    return out


def _block_prior_draw(block: GpBlockState, cache: CorrelationCache, rng: np.random.Generator) -> np.ndarray:
    M, T = block.field.shape
    psi = math.sqrt(block.zeta_psi) * rng.standard_normal()
    chol = cache.factor(block.lambdas)
    mu = psi + math.sqrt(block.sigma2) * (chol.lower @ rng.standard_normal(M))
    field = mu[:, None] + math.sqrt(block.tau2) * rng.standard_normal((M, T))
    return np.concatenate([[psi], mu, field.ravel()])


def _pack(block: GpBlockState) -> np.ndarray:
    return np.concatenate([[block.psi], block.mu, block.field.ravel()])


def _unpack(block: GpBlockState, vec: np.ndarray) -> GpBlockState:
    M, T = block.field.shape
    return block.replace(psi=float(vec[0]), mu=vec[1:M + 1], field=vec[M + 1:].reshape(M, T))


def counts_loglik(data: ObservedData) -> Callable:
    """Unnormalized binomial log-likelihood as a function of the flat pi field."""
    N = data.counts.ravel().astype(float)
    F = (data.n_trials - data.counts).ravel().astype(float)
    wet, dry = N > 0, F > 0

    def loglik(pi_flat):
        return float(np.dot(N[wet], log_expit(pi_flat[wet])) + np.dot(F[dry], log_expit(-pi_flat[dry])))

    return loglik


def counts_loglik_cells(data: ObservedData) -> Callable:
    """Binomial log-likelihood of each cell as a function of the flat pi field."""
    N = data.counts.ravel().astype(float)
    F = (data.n_trials - data.counts).ravel().astype(float)

    def loglik(pi_flat):
        return N * log_expit(pi_flat) + F * log_expit(-pi_flat)

    return loglik


def ess_cellwise(current: np.ndarray, mean: np.ndarray, sd: np.ndarray, loglik: Callable,
                 rng: np.random.Generator, max_shrinks: int = 1000) -> tuple:
    """Independent elliptical slice moves for many small problems at once.

    Row ``c`` of ``current`` (shape ``(C, d)``) has prior ``N(mean[c], diag(sd[c]^2))``
    and log-likelihood ``loglik(x)[c]``, which may depend on row ``c`` only.
    Every row gets its own angle and bracket. A row whose bracket collapses
    keeps its current value. Returns ``(new, max_shrinks_used)``.
    """
    C = current.shape[0]
    x0 = current - mean
    nu = sd * rng.standard_normal(current.shape)
    log_y = loglik(current) + np.log(rng.uniform(size=C))
    theta = rng.uniform(0.0, TWO_PI, size=C)
    lo, hi = theta - TWO_PI, theta.copy()
    out = current.copy()
    pending = np.ones(C, dtype=bool)
    for n in range(max_shrinks):
        prop = mean + x0 * np.cos(theta)[:, None] + nu * np.sin(theta)[:, None]
        ll = loglik(prop)
        acc = pending & (ll > log_y)
        out[acc] = prop[acc]
        pending &= ~acc
        if not pending.any():
            return out, n
        neg = pending & (theta < 0)
        pos = pending & ~(theta < 0)
        lo[neg] = theta[neg]
        hi[pos] = theta[pos]
        # a collapsed bracket means the target is too steep to resolve in floating point
        pending &= hi - lo > 1e-12
        if not pending.any():
            return out, n
        theta = np.where(pending, lo + (hi - lo) * rng.uniform(size=C), theta)
    raise SamplerError(f"cellwise slice exceeded {max_shrinks} shrinks in {int(pending.sum())} cells")


def cellwise_counts(field: np.ndarray, mean: np.ndarray, tau2: float, loglik_cells: Callable,
                    rng: np.random.Generator, max_shrinks: int = 1000) -> tuple:
    """Per-cell move of a pi field with prior ``N(mean, tau2)``; returns ``(field, shrinks)``."""
    shape = field.shape
    m = np.broadcast_to(mean, shape).reshape(-1, 1)
    sd = np.full_like(m, math.sqrt(tau2))
    new, n = ess_cellwise(field.reshape(-1, 1), m, sd, lambda x: loglik_cells(x[:, 0]), rng,
                          max_shrinks)
    return new.reshape(shape), n


def cellwise_magnitudes(gamma_field: np.ndarray, gamma_mean: np.ndarray, gamma_tau2: float,
                        delta_field: np.ndarray, delta_mean: np.ndarray, delta_tau2: float,
                        data: ObservedData, rng: np.random.Generator,
                        max_shrinks: int = 1000) -> tuple:
    """Per-cell joint move of ``(gamma, delta)``; returns ``(gamma, delta, shrinks)``."""
    shape = gamma_field.shape
    cur = np.column_stack([gamma_field.ravel(), delta_field.ravel()])
    mean = np.column_stack([np.broadcast_to(gamma_mean, shape).ravel(),
                            np.broadcast_to(delta_mean, shape).ravel()])
    sd = np.broadcast_to([math.sqrt(gamma_tau2), math.sqrt(delta_tau2)], cur.shape)
    new, n = ess_cellwise(cur, mean, sd,
                          lambda x: loglik_magnitudes_cells(data, x[:, 0], x[:, 1]), rng,
                          max_shrinks)
    return new[:, 0].reshape(shape), new[:, 1].reshape(shape), n


def ess_block_counts(state: ChainState, data: ObservedData, cache: CorrelationCache,
                     max_shrinks: int = 1000, loglik: Optional[Callable] = None) -> tuple:
    """Joint update of ``(psi, mu, field)`` of the pi block. Returns ``(block, outcome)``."""
    block = state.pi
    ll_field = loglik or counts_loglik(data)
    off = 1 + block.mu.shape[0]
    out = ess_generic(_pack(block), lambda g: _block_prior_draw(block, cache, g),
                      lambda v: ll_field(v[off:]), state.rng, max_shrinks)
    return _unpack(block, out.state), out


def ess_block_magnitudes(state: ChainState, data: ObservedData, cache_gamma: CorrelationCache,
                         cache_delta: CorrelationCache, max_shrinks: int = 1000) -> tuple:
    """Joint update of the gamma and delta hierarchies with one shared angle.

    Returns ``(gamma_block, delta_block, outcome)``.
    """
    g, d = state.gamma, state.delta
    M, T = g.field.shape
    n = 1 + M + M * T

    def prior_draw(rng):
        return np.concatenate([_block_prior_draw(g, cache_gamma, rng),
                               _block_prior_draw(d, cache_delta, rng)])

    def loglik(v):
        return loglik_magnitudes(data, v[1 + M:n], v[n + 1 + M:])

    out = ess_generic(np.concatenate([_pack(g), _pack(d)]), prior_draw, loglik,
                      state.rng, max_shrinks)
    return _unpack(g, out.state[:n]), _unpack(d, out.state[n:]), out


def slice_sample_1d(x0: float, logdens: Callable, rng: np.random.Generator,
                    width: float = 1.0, max_steps: int = 50,
                    max_shrinks: int = 1000) -> tuple:
    """Univariate slice sampler with stepping out and shrinkage.

    A bracket that shrinks below float resolution returns ``x0`` unchanged,
    which happens only where the density is too steep to resolve. Returns
    ``(x, n_evaluations)``.
    """
    f0 = logdens(x0)
    y = f0 + math.log(rng.uniform())
    lo = x0 - width * rng.uniform()
    hi = lo + width
    j = int(max_steps * rng.uniform())
    k = max_steps - 1 - j
    evals = 1
    while j > 0 and logdens(lo) > y:
        lo -= width
        j -= 1
        evals += 1
    while k > 0 and logdens(hi) > y:
        hi += width
        k -= 1
        evals += 1
    for _ in range(max_shrinks):
        x = lo + (hi - lo) * rng.uniform()
        evals += 1
        if logdens(x) > y:
            return x, evals
        if hi - lo <= 1e-12 * (1.0 + abs(x0)):
            return x0, evals
        if x < x0:
            lo = x
        else:
            hi = x
    raise SamplerError(f"slice sampler exceeded {max_shrinks} shrinks")


def noncentered_tau2(field: np.ndarray, mean: np.ndarray, tau2: float, zeta: float,
                     loglik: Callable, rng: np.random.Generator,
                     priors: PriorConfig = PriorConfig()) -> tuple:
    """Move ``tau2`` with ``z = (field - mean) / sqrt(tau2)`` fixed.

    ``mean`` broadcasts against ``field``; ``loglik`` takes a field. In
    ``(log tau2, z)`` coordinates the prior of ``z`` does not involve ``tau2``,
    so the target is the IGa prior on the log scale times the likelihood.
    Returns ``(tau2, field)``.
    """
    k = priors.variance_coga.k
    resid = field - mean
    u0 = math.log(tau2)

    def logdens(u):
        f = mean + math.exp(0.5 * (u - u0)) * resid
        ll = loglik(f)
        return -k * u - zeta * math.exp(-u) + ll if np.isfinite(ll) else -math.inf

    u, _ = slice_sample_1d(u0, logdens, rng)
    return math.exp(u), mean + math.exp(0.5 * (u - u0)) * resid


def noncentered_sigma2(block: GpBlockState, rng: np.random.Generator,
                       priors: PriorConfig = PriorConfig()) -> tuple:
    """Move ``sigma2`` with ``R^-1/2 (mu - psi) / sqrt(sigma2)`` fixed.

    ``mu - psi`` is rescaled, so no factorization is needed; the likelihood of
    the move is the Gaussian density of the field rows around ``mu``.
    Returns ``(sigma2, mu)``.
    """
    k = priors.variance_coga.k
    resid = block.mu - block.psi
    u0 = math.log(block.sigma2)

    def logdens(u):
        r = block.field - (block.psi + math.exp(0.5 * (u - u0)) * resid)[:, None]
        return -k * u - block.zeta_sigma2 * math.exp(-u) - 0.5 * float(np.sum(r * r)) / block.tau2

    u, _ = slice_sample_1d(u0, logdens, rng)
    return math.exp(u), block.psi + math.exp(0.5 * (u - u0)) * resid


RIDGE_SLOPE = 3.0


def ridge_sigma2_lambda(block: GpBlockState, cache: CorrelationCache, rng: np.random.Generator,
                        priors: PriorConfig = PriorConfig(), slope: float = RIDGE_SLOPE) -> tuple:
    """Slice move along ``(log sigma2, log lambda) + t (slope, 1, ..., 1)``.

    A Matern-3/2 field pins down roughly ``sigma2 / lambda^3`` but not the two
    separately, so Gibbs on each alone crawls along that ridge. The move is a
    translation, so the target is the joint conditional density in log
    coordinates. Returns ``(sigma2, lambdas)``.
    """
    k = priors.variance_coga.k
    resid = block.mu - block.psi
    M = resid.shape[0]
    s0, l0 = math.log(block.sigma2), np.log(block.lambdas)

    def logdens(t):
        s, l = s0 + slope * t, l0 + t
        try:
            chol = cache.factor(np.exp(l))
        except SingularMatrixError:
            return -math.inf
        z = chol.solve_lower(resid)
        return (-k * s - block.zeta_sigma2 * math.exp(-s)
                - 0.5 * float(l @ l) / priors.lengthscale_logvar
                - 0.5 * M * s - 0.5 * chol.logdet() - 0.5 * float(z @ z) * math.exp(-s))

    t, _ = slice_sample_1d(0.0, logdens, rng)
    return math.exp(s0 + slope * t), np.exp(l0 + t)


def noncentered_zeta_beta(block: LinearBlockState, X: np.ndarray, rng: np.random.Generator,
                          priors: PriorConfig = PriorConfig()) -> tuple:
    """Move each ``zeta_beta[j]`` with ``beta[j] / sqrt(zeta_beta[j])`` fixed.

    ``beta`` is rescaled along with it; the field is left alone, so the
    likelihood of the move is the Gaussian density of the field around ``X beta``.
    Returns ``(zeta_beta, beta)``.
    """
    a, rate = priors.zeta_psi_shape, priors.zeta_psi_rate
    zeta = np.array(block.zeta_beta, dtype=float)
    beta = np.array(block.beta, dtype=float)
    fbar = block.field.mean(axis=1)
    T = block.field.shape[1]
    for j in range(beta.shape[0]):
        u0 = math.log(zeta[j])
        rest = fbar - X @ beta + X[:, j] * beta[j]

        def logdens(u, j=j, u0=u0, rest=rest):
            r = rest - X[:, j] * beta[j] * math.exp(0.5 * (u - u0))
            return -a * u - rate * math.exp(-u) - 0.5 * T * float(r @ r) / block.tau2

        u, _ = slice_sample_1d(u0, logdens, rng)
        beta[j] *= math.exp(0.5 * (u - u0))
        zeta[j] = math.exp(u)
    return zeta, beta


# ---------------------------------------------------------------------------
# full scans

MIN_INIT_VARIANCE = 1e-2


def empirical_fields(data: ObservedData) -> tuple:
    """Per-cell estimates of the (pi, gamma, delta) fields.

    pi uses a smoothed logit of the wet-day fraction. For magnitudes,
    ``log W = delta + G / k`` with ``G`` a standard Gumbel-min variable, so the
    log-magnitude mean and variance of a cell give ``k`` and ``delta``. Cells
    without trials or with fewer than two events take the average of the
    estimable cells.
    """
    M, T = data.M, data.T
    n, N = data.n_trials.astype(float), data.counts.astype(float)
    pi = np.log((N + 0.5) / (n - N + 0.5))
    pi = np.where(n > 0, pi, np.nan)

    ncell = data.counts.ravel()
    s1 = data.cell_sum_log
    s2 = np.bincount(data.cell_index, weights=data.log_magnitudes ** 2, minlength=M * T)
    with np.errstate(divide="ignore", invalid="ignore"):
        mean = s1 / ncell
        var = (s2 - ncell * mean ** 2) / (ncell - 1)
    ok = (ncell >= 2) & (var > 0)
    k = np.full(M * T, np.nan)
    k[ok] = math.pi / np.sqrt(6.0 * var[ok])
    gamma = np.log(k)
    delta = np.where(ok, mean + dist.EULER_GAMMA / k, np.nan)

    def fill(f):
        f = np.asarray(f, dtype=float).reshape(M, T)
        good = np.isfinite(f)
        return np.where(good, f, f[good].mean() if good.any() else 0.0)

    return fill(pi), fill(gamma), fill(delta)


def _block_from_field(f: np.ndarray, p: int, zetas: tuple) -> GpBlockState:
    mu = f.mean(axis=1)
    psi = float(mu.mean())
    tau2 = max(float(np.mean((f - mu[:, None]) ** 2)), MIN_INIT_VARIANCE)
    sigma2 = max(float(np.mean((mu - psi) ** 2)), MIN_INIT_VARIANCE)
    return GpBlockState(psi=psi, mu=mu, field=f.copy(), tau2=tau2, sigma2=sigma2,
                        lambdas=np.ones(p), zeta_psi=zetas[0], zeta_tau2=zetas[1],
                        zeta_sigma2=zetas[2])


def init_chain_state(data: ObservedData, config: SamplerConfig,
                     rng: Optional[np.random.Generator] = None) -> ChainState:
    """Starting state; unit length scales and prior draws of the scale latents.

    With ``init="prior"`` means and fields start at zero with unit variances.
    With ``init="data"`` fields start at per-cell estimates and the variances
    at their empirical spread, which avoids the sampler spending thousands of
    scans escaping a collapsed ``tau2``.
    """
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    pr = config.priors
    coga = pr.variance_coga
    fields = empirical_fields(data) if config.init == "data" else None
    blocks = []
    for b in range(3):
        zetas = (float(dist.sample_inverse_gamma(pr.zeta_psi_shape, pr.zeta_psi_rate, rng)),
                 float(dist.sample_gamma(coga.v, coga.rate, rng)),
                 float(dist.sample_gamma(coga.v, coga.rate, rng)))
        if fields is not None:
            blocks.append(_block_from_field(fields[b], data.p, zetas))
            continue
        blocks.append(GpBlockState(
            psi=0.0, mu=np.zeros(data.M), field=np.zeros((data.M, data.T)),
            tau2=1.0, sigma2=1.0, lambdas=np.ones(data.p),
            zeta_psi=zetas[0], zeta_tau2=zetas[1], zeta_sigma2=zetas[2],
        ))
    return ChainState(*blocks, rng=rng, iteration=0)


class SemiParametricSampler:
    """Runs full scans of the semi-parametric model on fixed data."""

    def __init__(self, data: ObservedData, config: SamplerConfig = SamplerConfig()):
        self.config = config
        self.set_data(data)

    def set_data(self, data: ObservedData):
        """Swap the observations (points must stay the same once caches exist)."""
        if getattr(self, "data", None) is None or not np.array_equal(self.data.points, data.points):
            self.caches = {name: CorrelationCache(data.points) for name in ("pi", "gamma", "delta")}
        self.data = data
        self._counts_loglik = counts_loglik(data)
        self._counts_cells = counts_loglik_cells(data)

    def _active(self) -> tuple:
        return ("pi", "gamma", "delta") if self.config.update_counts else ("gamma", "delta")

    def step(self, state: ChainState) -> tuple:
        cfg, pr, rng = self.config, self.config.priors, state.rng
        blocks = {"pi": state.pi, "gamma": state.gamma, "delta": state.delta}
        active = self._active()
        info = ScanInfo(iteration=state.iteration + 1)

        for name in active:
            b = blocks[name]
            blocks[name] = b.replace(
                zeta_psi=gibbs_zeta_psi(b.psi, rng, pr),
                zeta_tau2=gibbs_zeta_variance(b.tau2, rng, pr),
                zeta_sigma2=gibbs_zeta_variance(b.sigma2, rng, pr),
            )

        for name in active:
            b = blocks[name]
            if cfg.conditionals == "printed":
                tau2, sigma2 = _printed_variance_updates(b, rng, pr)
            else:
                tau2 = gibbs_tau2(b, rng, pr)
                sigma2 = gibbs_sigma2(b, self.caches[name], rng, pr)
            blocks[name] = b.replace(tau2=tau2, sigma2=sigma2)

        for name in active:
            b = blocks[name]
            out = ess_lengthscales(b, self.caches[name], rng, pr, cfg.max_shrinks)
            info.shrinks[f"{name}.lambda"] = out.n_shrinks
            info.n_repeats += int(np.sum(out.state == b.lambdas))
            blocks[name] = b.replace(lambdas=out.state)

        tmp = ChainState(blocks["pi"], blocks["gamma"], blocks["delta"], rng, state.iteration)
        if cfg.update_counts:
            new_pi, out = ess_block_counts(tmp, self.data, self.caches["pi"], cfg.max_shrinks,
                                           self._counts_loglik)
            info.shrinks["pi.latent"] = out.n_shrinks
            info.loglik_counts = out.loglik
            info.n_repeats += int(np.sum(_pack(new_pi) == _pack(tmp.pi)))
            tmp.pi = new_pi

        new_g, new_d, out = ess_block_magnitudes(tmp, self.data, self.caches["gamma"],
                                                 self.caches["delta"], cfg.max_shrinks)
        info.shrinks["magnitudes.latent"] = out.n_shrinks
        info.loglik_magnitudes = out.loglik
        info.n_repeats += int(np.sum(_pack(new_g) == _pack(tmp.gamma)))
        info.n_repeats += int(np.sum(_pack(new_d) == _pack(tmp.delta)))

        new_state = ChainState(tmp.pi, new_g, new_d, rng, state.iteration + 1)
        if cfg.cellwise_moves:
            if cfg.update_counts:
                b = new_state.pi
                f, n = cellwise_counts(b.field, b.mu[:, None], b.tau2, self._counts_cells, rng,
                                       cfg.max_shrinks)
                info.shrinks["pi.cells"] = n
                info.n_repeats += int(np.sum(f == b.field))
                new_state.pi = b.replace(field=f)
            g, d = new_state.gamma, new_state.delta
            fg, fd, n = cellwise_magnitudes(g.field, g.mu[:, None], g.tau2, d.field,
                                            d.mu[:, None], d.tau2, self.data, rng, cfg.max_shrinks)
            info.shrinks["magnitudes.cells"] = n
            info.n_repeats += int(np.sum(fg == g.field) + np.sum(fd == d.field))
            new_state.gamma, new_state.delta = g.replace(field=fg), d.replace(field=fd)
        if cfg.centered_moves:
            for name in active:
                b = getattr(new_state, name)
                cache = self.caches[name]
                b = b.replace(mu=gibbs_mu(b, cache, rng))
                setattr(new_state, name, b.replace(psi=gibbs_psi(b, cache, rng)))
        if cfg.interweave:
            for name in active:
                b = getattr(new_state, name)
                tau2, f = noncentered_tau2(b.field, b.mu[:, None], b.tau2, b.zeta_tau2,
                                           self._field_loglik(new_state, name), rng, pr)
                setattr(new_state, name, b.replace(tau2=tau2, field=f))
        if cfg.scale_moves:
            for name in active:
                b = getattr(new_state, name)
                sigma2, mu = noncentered_sigma2(b, rng, pr)
                b = b.replace(sigma2=sigma2, mu=mu)
                sigma2, lambdas = ridge_sigma2_lambda(b, self.caches[name], rng, pr)
                setattr(new_state, name, b.replace(sigma2=sigma2, lambdas=lambdas))
        return new_state, info

    def _field_loglik(self, state, name: str) -> Callable:
        if name == "pi":
            return lambda f: self._counts_loglik(f.ravel())
        if name == "gamma":
            return lambda f: loglik_magnitudes(self.data, f, state.delta.field)
        return lambda f: loglik_magnitudes(self.data, state.gamma.field, f)

    def scan(self, state: ChainState) -> ChainState:
        return self.step(state)[0]


def full_scan(state: ChainState, data: ObservedData, config: SamplerConfig = SamplerConfig(),
              sampler: Optional[SemiParametricSampler] = None) -> ChainState:
    """Apply one complete scan; pass ``sampler`` to reuse its factor caches."""
    sampler = sampler or SemiParametricSampler(data, config)
    return sampler.scan(state)


# ---------------------------------------------------------------------------
# parametric (linear) competitor

def init_linear_state(data: ObservedData, config: SamplerConfig,
                      rng: Optional[np.random.Generator] = None) -> LinearModelState:
    """Starting state for the linear model; ``init="data"`` uses least squares on per-cell estimates."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    pr = config.priors
    coga = pr.variance_coga
    q = data.p + 1
    fields = empirical_fields(data) if config.init == "data" else None
    X = design_matrix(data.points)
    blocks = []
    for b in range(3):
        zeta_beta = dist.sample_inverse_gamma(pr.zeta_psi_shape, pr.zeta_psi_rate, rng, size=q)
        zeta_tau2 = float(dist.sample_gamma(coga.v, coga.rate, rng))
        if fields is not None:
            f = fields[b]
            beta = np.linalg.lstsq(X, f.mean(axis=1), rcond=None)[0]
            tau2 = max(float(np.mean((f - (X @ beta)[:, None]) ** 2)), MIN_INIT_VARIANCE)
            blocks.append(LinearBlockState(beta=beta, zeta_beta=zeta_beta, tau2=tau2,
                                           zeta_tau2=zeta_tau2, field=f.copy()))
            continue
        blocks.append(LinearBlockState(
            beta=np.zeros(q), zeta_beta=zeta_beta, tau2=1.0, zeta_tau2=zeta_tau2,
            field=np.zeros((data.M, data.T)),
        ))
    return LinearModelState(*blocks, rng=rng, iteration=0)


def _linear_prior_draw(block: LinearBlockState, X: np.ndarray, rng) -> np.ndarray:
    q = X.shape[1]
    beta = np.sqrt(block.zeta_beta) * rng.standard_normal(q)
    field = (X @ beta)[:, None] + math.sqrt(block.tau2) * rng.standard_normal(block.field.shape)
    return np.concatenate([beta, field.ravel()])


def _linear_pack(block: LinearBlockState) -> np.ndarray:
    return np.concatenate([block.beta, block.field.ravel()])


def _linear_unpack(block: LinearBlockState, vec) -> LinearBlockState:
    q = block.beta.shape[0]
    return block.replace(beta=vec[:q], field=vec[q:].reshape(block.field.shape))


class ParametricSampler:
    """Scans of the linear competitor: fields are ``X beta`` plus white noise."""

    def __init__(self, data: ObservedData, config: SamplerConfig = SamplerConfig()):
        self.config = config
        self.set_data(data)

    def set_data(self, data: ObservedData):
        self.data = data
        self.X = design_matrix(data.points)
        self._counts_loglik = counts_loglik(data)
        self._counts_cells = counts_loglik_cells(data)

    def step(self, state: LinearModelState) -> tuple:
        cfg, pr, rng, X = self.config, self.config.priors, state.rng, self.X
        coga = pr.variance_coga
        names = ("pi", "gamma", "delta") if cfg.update_counts else ("gamma", "delta")
        blocks = {"pi": state.pi, "gamma": state.gamma, "delta": state.delta}
        info = ScanInfo(iteration=state.iteration + 1)

        for name in names:
            b = blocks[name]
            zeta_beta = dist.sample_inverse_gamma(pr.zeta_psi_shape + 0.5,
                                                  pr.zeta_psi_rate + 0.5 * b.beta ** 2, rng)
            blocks[name] = b.replace(zeta_beta=np.asarray(zeta_beta, dtype=float),
                                     zeta_tau2=gibbs_zeta_variance(b.tau2, rng, pr))
        for name in names:
            b = blocks[name]
            e = b.field - (X @ b.beta)[:, None]
            tau2 = float(dist.sample_inverse_gamma(coga.k + 0.5 * e.size,
                                                   b.zeta_tau2 + 0.5 * float(np.sum(e * e)), rng))
            blocks[name] = b.replace(tau2=tau2)

        q = X.shape[1]
        if cfg.update_counts:
            b = blocks["pi"]
            out = ess_generic(_linear_pack(b), lambda g: _linear_prior_draw(b, X, g),
                              lambda v: self._counts_loglik(v[q:]), rng, cfg.max_shrinks)
            info.shrinks["pi.latent"] = out.n_shrinks
            info.loglik_counts = out.loglik
            info.n_repeats += int(np.sum(out.state == _linear_pack(b)))
            blocks["pi"] = _linear_unpack(b, out.state)

        g, d = blocks["gamma"], blocks["delta"]
        n = q + g.field.size

        def prior_draw(rng_):
            return np.concatenate([_linear_prior_draw(g, X, rng_), _linear_prior_draw(d, X, rng_)])

        out = ess_generic(np.concatenate([_linear_pack(g), _linear_pack(d)]), prior_draw,
                          lambda v: loglik_magnitudes(self.data, v[q:n], v[n + q:]),
                          rng, cfg.max_shrinks)
        info.shrinks["magnitudes.latent"] = out.n_shrinks
        info.loglik_magnitudes = out.loglik
        old = np.concatenate([_linear_pack(g), _linear_pack(d)])
        info.n_repeats += int(np.sum(out.state == old))
        blocks["gamma"] = _linear_unpack(g, out.state[:n])
        blocks["delta"] = _linear_unpack(d, out.state[n:])
        if cfg.cellwise_moves:
            if cfg.update_counts:
                b = blocks["pi"]
                f, ns = cellwise_counts(b.field, (X @ b.beta)[:, None], b.tau2, self._counts_cells,
                                        rng, cfg.max_shrinks)
                info.shrinks["pi.cells"] = ns
                info.n_repeats += int(np.sum(f == b.field))
                blocks["pi"] = b.replace(field=f)
            g, d = blocks["gamma"], blocks["delta"]
            fg, fd, ns = cellwise_magnitudes(g.field, (X @ g.beta)[:, None], g.tau2, d.field,
                                             (X @ d.beta)[:, None], d.tau2, self.data, rng,
                                             cfg.max_shrinks)
            info.shrinks["magnitudes.cells"] = ns
            info.n_repeats += int(np.sum(fg == g.field) + np.sum(fd == d.field))
            blocks["gamma"], blocks["delta"] = g.replace(field=fg), d.replace(field=fd)
        if cfg.centered_moves:
            for name in names:
                b = blocks[name]
                blocks[name] = b.replace(beta=gibbs_beta(b, X, rng))
        if cfg.interweave:
            for name in names:
                b = blocks[name]
                zeta_beta, beta = noncentered_zeta_beta(b, X, rng, pr)
                blocks[name] = b.replace(zeta_beta=zeta_beta, beta=beta)
            for name in names:
                b = blocks[name]
                if name == "pi":
                    ll = lambda f: self._counts_loglik(f.ravel())
                elif name == "gamma":
                    ll = lambda f: loglik_magnitudes(self.data, f, blocks["delta"].field)
                else:
                    ll = lambda f: loglik_magnitudes(self.data, blocks["gamma"].field, f)
                tau2, f = noncentered_tau2(b.field, (X @ b.beta)[:, None], b.tau2, b.zeta_tau2,
                                           ll, rng, pr)
                blocks[name] = b.replace(tau2=tau2, field=f)
        return LinearModelState(blocks["pi"], blocks["gamma"], blocks["delta"], rng,
                                state.iteration + 1), info

    def scan(self, state: LinearModelState) -> LinearModelState:
        return self.step(state)[0]


def full_scan_parametric(state: LinearModelState, data: ObservedData,
                         config: SamplerConfig = SamplerConfig(),
                         sampler: Optional[ParametricSampler] = None) -> LinearModelState:
    sampler = sampler or ParametricSampler(data, config)
    return sampler.scan(state)


# ---------------------------------------------------------------------------
# chain driver

@dataclass
class ChainResult:
    draws: np.ndarray            # (n_stored, width)
    names: list
    iterations: np.ndarray       # scan number of each stored row
    final_state: object
    max_shrinks_seen: int = 0
    total_shrinks: int = 0
    n_repeats: int = 0
    loglik_trace: list = dc_field(default_factory=list)


def make_sampler(model: str, data: ObservedData, config: SamplerConfig):
    if model == "semiparametric":
        return SemiParametricSampler(data, config)
    if model == "parametric":
        return ParametricSampler(data, config)
    raise ValueError(f"unknown model {model!r}")


def init_state(model: str, data: ObservedData, config: SamplerConfig):
    if model == "semiparametric":
        return init_chain_state(data, config)
    if model == "parametric":
        return init_linear_state(data, config)
    raise ValueError(f"unknown model {model!r}")


def run_chain(model: str, data: ObservedData, config: SamplerConfig,
              callback: Optional[Callable[[ScanInfo], None]] = None,
              state=None, until: Optional[int] = None) -> ChainResult:
    """Run scans up to ``until`` (default ``config.n_iterations``), keeping thinned draws.

    A ``state`` from an earlier run continues that run; with its generator
    intact the result is identical to an uninterrupted chain.
    """
    sampler = make_sampler(model, data, config)
    if state is None:
        state = init_state(model, data, config)
    names = state.vector_names(data.M, data.T, data.p)
    until = config.n_iterations if until is None else until
    rows, iters = [], []
    result = ChainResult(np.empty((0, len(names))), names, np.empty(0, dtype=int), state)
    while state.iteration < until:
        state, info = sampler.step(state)
        result.total_shrinks += sum(info.shrinks.values())
        result.max_shrinks_seen = max(result.max_shrinks_seen, *info.shrinks.values())
        result.n_repeats += info.n_repeats
        result.loglik_trace.append((info.loglik_counts, info.loglik_magnitudes))
        if callback is not None:
            callback(info)
        if config.is_stored(state.iteration):
            rows.append(state.to_vector())
            iters.append(state.iteration)
    if rows:
        result.draws = np.vstack(rows)
        result.iterations = np.asarray(iters, dtype=int)
    result.final_state = state
    return result

"""Matérn-3/2 product kernel, covariance assembly and Gaussian helpers.

The kernel between two covariate vectors ``s`` and ``t`` is

    k(s, t) = sigma2 * prod_h (1 + sqrt(3) |s_h - t_h| / l_h) exp(-sqrt(3) |s_h - t_h| / l_h)

with one length scale ``l_h`` per covariate dimension.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DomainError, SingularMatrixError

SQRT3 = math.sqrt(3.0)
LOG_2PI = math.log(2.0 * math.pi)

# relative to the mean diagonal; the first rung is an exact factorization
JITTER_LADDER = (0.0, 1e-10, 1e-8, 1e-6)


@dataclass(frozen=True)
class KernelParams:
    sigma2: float
    lambdas: np.ndarray

    def __post_init__(self):
        lambdas = np.atleast_1d(np.asarray(self.lambdas, dtype=float))
        object.__setattr__(self, "lambdas", lambdas)
        if not self.sigma2 > 0:
            raise DomainError(f"sigma2 must be positive, got {self.sigma2}")
        if np.any(~(lambdas > 0)):
            raise DomainError(f"length scales must be positive, got {lambdas}")

    @property
    def p(self) -> int:
        return self.lambdas.shape[0]


@dataclass(frozen=True)
class CholFactor:
    """Lower Cholesky factor of ``A + jitter_used * I``."""

    lower: np.ndarray
    jitter_used: float = 0.0

    @property
    def size(self) -> int:
        return self.lower.shape[0]

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.lower))))

    def solve_lower(self, b: np.ndarray) -> np.ndarray:
        """Return ``L^{-1} b``."""
        return solve_triangular(self.lower, b, lower=True, check_finite=False)

    def scaled(self, factor: float) -> "CholFactor":
        """Factor of ``factor * (A + jitter I)`` for a positive scalar ``factor``."""
        return CholFactor(self.lower * math.sqrt(factor), self.jitter_used * factor)


def matern32_1d(d, lam):
    """One-dimensional Matérn-3/2 correlation at distance ``d``."""
    lam = np.asarray(lam, dtype=float)
    if np.any(~(lam > 0)):
        raise DomainError(f"length scale must be positive, got {lam}")
    a = SQRT3 * np.abs(np.asarray(d, dtype=float)) / lam
    out = (1.0 + a) * np.exp(-a)
    return float(out) if out.ndim == 0 else out


def _as_points(points) -> np.ndarray:
    arr = np.asarray(points, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError("points must be a sequence of equal-length coordinate vectors")
    return arr


def _correlation_from_absdiff(absdiff: np.ndarray, lambdas: np.ndarray) -> np.ndarray:
    # absdiff has shape (..., p); reduce over the last axis
    a = absdiff * (SQRT3 / lambdas)
    return np.exp(-a.sum(axis=-1)) * np.prod(1.0 + a, axis=-1)


def kernel_eval(s: Sequence[float], s2: Sequence[float], params: KernelParams) -> float:
    s = np.asarray(s, dtype=float)
    s2 = np.asarray(s2, dtype=float)
    if s.shape != s2.shape or s.shape != (params.p,):
        raise ValueError(
            f"dimension mismatch: {s.shape}, {s2.shape} vs {params.p} length scales"
        )
    return params.sigma2 * float(_correlation_from_absdiff(np.abs(s - s2), params.lambdas))


def cross_covariance(targets, points, params: KernelParams) -> np.ndarray:
    """Cross-covariance between targets and points.

    A single target (1-D input) gives a vector of length M; a 2-D array of
    targets gives an ``(M*, M)`` matrix.
    """
    single = np.asarray(targets).ndim == 1
    t = _as_points(targets)
    x = _as_points(points)
    if t.shape[1] != params.p or x.shape[1] != params.p:
        raise ValueError(
            f"dimension mismatch: targets p={t.shape[1]}, points p={x.shape[1]}, "
            f"kernel p={params.p}"
        )
    absdiff = np.abs(t[:, None, :] - x[None, :, :])
    out = params.sigma2 * _correlation_from_absdiff(absdiff, params.lambdas)
    return out[0] if single else out


def covariance_matrix(points, params: KernelParams) -> np.ndarray:
    x = _as_points(points)
    k = cross_covariance(x, x, params)
    # enforce exact symmetry and an exact sigma2 diagonal
    k = 0.5 * (k + k.T)
    np.fill_diagonal(k, params.sigma2)
    return k


def cholesky_jittered(matrix) -> CholFactor:
    a = np.asarray(matrix, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("matrix must be square")
    scale = float(np.mean(np.diag(a)))
    eye = np.eye(a.shape[0])
    for rel in JITTER_LADDER:
        jitter = rel * scale
        if rel > 0 and not jitter > 0:
            break
        try:
            lower = np.linalg.cholesky(a + jitter * eye if jitter else a)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.isfinite(lower)) and np.all(np.diag(lower) > 0):
            return CholFactor(lower, jitter)
    raise SingularMatrixError(
        f"matrix not positive definite at jitter {JITTER_LADDER[-1]:g} x mean diagonal"
    )


def mvn_logpdf(x, mean, chol: CholFactor) -> float:
    x = np.asarray(x, dtype=float)
    mean = np.asarray(mean, dtype=float)
    if x.shape != (chol.size,) or mean.shape not in ((chol.size,), ()):
        raise ValueError(f"dimension mismatch: x {x.shape}, factor size {chol.size}")
    z = chol.solve_lower(x - mean)
    return (
        -0.5 * chol.size * LOG_2PI
        - float(np.sum(np.log(np.diag(chol.lower))))
        - 0.5 * float(z @ z)
    )


def mvn_sample(mean, chol: CholFactor, rng: np.random.Generator) -> np.ndarray:
    mean = np.asarray(mean, dtype=float)
    z = rng.standard_normal(chol.size)
    return mean + chol.lower @ z


class CorrelationCache:
    """Unit-amplitude correlation factors for a fixed set of points.

    Pairwise absolute differences are computed once; factors are keyed on
    the exact length-scale values so repeated requests with unchanged
    length scales (Gibbs step, likelihood threshold, prior draws) reuse the
    same factorization.
    """

    def __init__(self, points, maxsize: int = 4):
        self.points = _as_points(points)
        self.absdiff = np.abs(self.points[:, None, :] - self.points[None, :, :])
        self._store: dict[bytes, CholFactor] = {}
        self._maxsize = maxsize

    @property
    def size(self) -> int:
        return self.points.shape[0]

    def correlation(self, lambdas: np.ndarray) -> np.ndarray:
        r = _correlation_from_absdiff(self.absdiff, np.asarray(lambdas, dtype=float))
        np.fill_diagonal(r, 1.0)
        return r

    def factor(self, lambdas: np.ndarray) -> CholFactor:
        lambdas = np.asarray(lambdas, dtype=float)
        key = lambdas.tobytes()
        hit = self._store.get(key)
        if hit is not None:
            return hit
        chol = cholesky_jittered(self.correlation(lambdas))
        if len(self._store) >= self._maxsize:
            self._store.pop(next(iter(self._store)))
        self._store[key] = chol
        return chol

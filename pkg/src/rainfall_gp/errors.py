"""Exception types raised across the package."""

import numpy as np


class DomainError(ValueError):
    """An argument lies outside the support of a density or formula."""


class SingularMatrixError(np.linalg.LinAlgError):
    """Cholesky factorization failed even at the largest jitter."""


class SamplerError(RuntimeError):
    """An MCMC update could not complete (e.g. shrink bound exceeded)."""


class DataError(ValueError):
    """Input data is malformed or inconsistent."""


class ArchiveError(ValueError):
    """A chain archive is truncated or its header does not match its rows."""

"""Squared-exponential GP experts.

Covariance construction, the marginal likelihood and its gradient, the
conditional predictive distribution, and an explicit inverse-covariance cache
that is maintained by rank-1 updates as points move between experts.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lapack

from .errors import InvalidParameterError, NumericalError, RefactorizationWarning

JITTER = 1e-8
PIVOT_TOL = 1e-12
REFRESH_EVERY = 500
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class ExpertHyper:
    """Hyperparameters of one SE expert.

    ``output_scale`` and ``noise_var`` are variances in standardized-response
    units, ``length_scales`` holds one entry per input dimension.
    """

    output_scale: float
    length_scales: np.ndarray
    noise_var: float

    def __post_init__(self):
        self.output_scale = float(self.output_scale)
        self.noise_var = float(self.noise_var)
        self.length_scales = np.atleast_1d(np.asarray(self.length_scales, dtype=float))
        if self.length_scales.ndim != 1:
            raise InvalidParameterError("length_scales must be a vector")
        if not (self.output_scale > 0 and self.noise_var > 0 and np.all(self.length_scales > 0)):
            raise InvalidParameterError(
                f"hyperparameters must be strictly positive, got {self.to_vector()}"
            )

    @property
    def dim(self) -> int:
        return self.length_scales.size

    def to_vector(self) -> np.ndarray:
        """Pack as (output_scale, l_1..l_D, noise_var)."""
        return np.concatenate(([self.output_scale], self.length_scales, [self.noise_var]))

    @classmethod
    def from_vector(cls, theta) -> "ExpertHyper":
        theta = np.asarray(theta, dtype=float)
        return cls(theta[0], theta[1:-1].copy(), theta[-1])

    def copy(self) -> "ExpertHyper":
        return ExpertHyper(self.output_scale, self.length_scales.copy(), self.noise_var)


def _check_lengths(l):
    l = np.asarray(l, dtype=float)
    if np.any(l <= 0):
        raise InvalidParameterError(f"length-scales must be positive, got {l}")
    return l


def se_correlation(x_m, x_n, l) -> float:
    """exp(-sum_d ((x_m,d - x_n,d) / l_d)^2)."""
    l = _check_lengths(l)
    diff = (np.asarray(x_m, dtype=float) - np.asarray(x_n, dtype=float)) / l
    return float(np.exp(-np.dot(diff, diff)))


def covariance_entry(x_m, x_n, hyper: ExpertHyper, same_index: bool) -> float:
    value = hyper.output_scale * se_correlation(x_m, x_n, hyper.length_scales)
    if same_index:
        value += hyper.noise_var
    return value


def squared_differences(X1, X2=None) -> np.ndarray:
    """Per-dimension squared differences, shape (D, n1, n2)."""
    X1 = np.atleast_2d(X1)
    X2 = X1 if X2 is None else np.atleast_2d(X2)
    diff = X1.T[:, :, None] - X2.T[:, None, :]
    return diff * diff


def correlation_matrix(X1, X2, l) -> np.ndarray:
    l = _check_lengths(l)
    X1 = np.atleast_2d(X1) / l
    X2 = np.atleast_2d(X2) / l
    sq = (
        np.sum(X1 * X1, axis=1)[:, None]
        + np.sum(X2 * X2, axis=1)[None, :]
        - 2.0 * X1 @ X2.T
    )
    return np.exp(-np.maximum(sq, 0.0))


def covariance_matrix(X, hyper: ExpertHyper, jitter: float = JITTER) -> np.ndarray:
    """K = sigma^2 C + (tau^2 + jitter) I for the rows of X."""
    sq = squared_differences(X)
    C = np.exp(-np.tensordot(1.0 / hyper.length_scales**2, sq, axes=1))
    K = hyper.output_scale * C
    K[np.diag_indices_from(K)] += hyper.noise_var + jitter
    return K


def spd_inverse(K: np.ndarray) -> tuple[np.ndarray, float]:
    """Inverse and log-determinant of an SPD matrix via Cholesky."""
    n = K.shape[0]
    if n == 0:
        return np.zeros((0, 0)), 0.0
    chol, info = lapack.dpotrf(K, lower=1, clean=0)
    if info != 0:
        raise NumericalError(f"covariance matrix of size {n} is not positive definite")
    log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))
    inv, info = lapack.dpotri(chol, lower=1)
    if info != 0:
        raise NumericalError("inversion from Cholesky factor failed")
    inv = np.tril(inv) + np.tril(inv, -1).T
    return inv, log_det


def _lml_parts(sq, y, hyper: ExpertHyper, jitter: float):
    C = np.exp(-np.tensordot(1.0 / hyper.length_scales**2, sq, axes=1))
    K = hyper.output_scale * C
    K[np.diag_indices_from(K)] += hyper.noise_var + jitter
    K_inv, log_det = spd_inverse(K)
    alpha = K_inv @ y
    lml = -0.5 * float(y @ alpha) - 0.5 * log_det - 0.5 * y.size * LOG_2PI
    return lml, C, K_inv, alpha


def log_marginal_likelihood(X, y, hyper: ExpertHyper, jitter: float = JITTER) -> float:
    """log N(y; 0, K) with K built from ``hyper`` over the rows of X."""
    y = np.asarray(y, dtype=float)
    if y.size == 0:
        raise InvalidParameterError("log_marginal_likelihood needs at least one point")
    return _lml_parts(squared_differences(X), y, hyper, jitter)[0]


def lml_and_gradient(X, y, hyper: ExpertHyper, jitter: float = JITTER, sq=None):
    """Marginal likelihood and its gradient w.r.t. (sigma^2, l_1..l_D, tau^2).

    ``sq`` may carry precomputed :func:`squared_differences` of X, which is
    worth doing when the same points are evaluated repeatedly (HMC).
    """
    y = np.asarray(y, dtype=float)
    if y.size == 0:
        raise InvalidParameterError("lml_and_gradient needs at least one point")
    if sq is None:
        sq = squared_differences(X)
    lml, C, K_inv, alpha = _lml_parts(sq, y, hyper, jitter)
    W = np.outer(alpha, alpha) - K_inv
    WC = W * C
    l = hyper.length_scales
    grad = np.empty(l.size + 2)
    grad[0] = 0.5 * np.sum(WC)
    # d exp(-delta / l^2) / dl = 2 delta / l^3 * exp(-delta / l^2)
    grad[1:-1] = hyper.output_scale * np.tensordot(sq, WC, axes=([1, 2], [0, 1])) / l**3
    grad[-1] = 0.5 * np.trace(W)
    return lml, grad


def lml_gradient(X, y, hyper: ExpertHyper, jitter: float = JITTER) -> np.ndarray:
    return lml_and_gradient(X, y, hyper, jitter)[1]


def conditional_predictive(x_star, X, y, hyper: ExpertHyper, jitter: float = JITTER):
    """Predictive mean and variance of a noisy observation at ``x_star``.

    With no conditioning data this is the prior, (0, sigma^2 + tau^2).
    """
    y = np.asarray(y, dtype=float)
    prior_var = hyper.output_scale + hyper.noise_var
    if y.size == 0:
        return 0.0, prior_var
    X = np.atleast_2d(X)
    K_inv, _ = spd_inverse(covariance_matrix(X, hyper, jitter))
    k = hyper.output_scale * correlation_matrix(np.atleast_2d(x_star), X, hyper.length_scales)[0]
    mean = float(k @ (K_inv @ y))
    var = prior_var - float(k @ K_inv @ k)
    return mean, max(var, hyper.noise_var)


@dataclass
class ExpertPosteriorCache:
    """Explicit inverse of an expert's covariance over its assigned points.

    ``cov`` is kept alongside the inverse so that degenerate pivots and
    periodic refreshes can re-factorize without access to the data.
    """

    assigned_indices: list = field(default_factory=list)
    cov: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    cov_inverse: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    log_det: float = 0.0
    ops_since_refresh: int = 0

    def __len__(self):
        return len(self.assigned_indices)

    def position(self, index) -> int:
        return self.assigned_indices.index(index)


def build_cache(indices, X, hyper: ExpertHyper, jitter: float = JITTER) -> ExpertPosteriorCache:
    """Factorize the covariance of the points ``X[indices]`` from scratch."""
    indices = [int(i) for i in indices]
    if not indices:
        return ExpertPosteriorCache()
    K = covariance_matrix(X[indices], hyper, jitter)
    inv, log_det = spd_inverse(K)
    return ExpertPosteriorCache(indices, K, inv, log_det, 0)


def _refactorize(indices, cov, reason=None) -> ExpertPosteriorCache:
    if reason is not None:
        warnings.warn(reason, RefactorizationWarning, stacklevel=3)
    inv, log_det = spd_inverse(cov)
    return ExpertPosteriorCache(list(indices), cov, inv, log_det, 0)


def rank1_downdate(cache: ExpertPosteriorCache, removed_index) -> ExpertPosteriorCache:
    """Drop one point, using D^-1 = d - c b / a on the partitioned inverse."""
    j = cache.position(removed_index)
    n = len(cache)
    indices = cache.assigned_indices[:j] + cache.assigned_indices[j + 1:]
    if n == 1:
        return ExpertPosteriorCache()
    keep = np.r_[0:j, j + 1:n]
    cov = cache.cov[np.ix_(keep, keep)]
    a = cache.cov_inverse[j, j]
    if a <= PIVOT_TOL:
        return _refactorize(indices, cov, f"downdate pivot {a:.3g} too small")
    if cache.ops_since_refresh + 1 >= REFRESH_EVERY:
        return _refactorize(indices, cov)
    c = cache.cov_inverse[keep, j]
    inv = cache.cov_inverse[np.ix_(keep, keep)] - np.outer(c, c) / a
    return ExpertPosteriorCache(
        indices, cov, inv, cache.log_det + math.log(a), cache.ops_since_refresh + 1
    )


def rank1_update(cache: ExpertPosteriorCache, new_index, column, diagonal) -> ExpertPosteriorCache:
    """Append one point given its covariances with the cached points.

    ``column`` holds k(x_new, x_j) for the cached points in order and
    ``diagonal`` is k(x_new, x_new) including noise.
    """
    n = len(cache)
    column = np.asarray(column, dtype=float).reshape(n)
    if diagonal <= 0:
        raise InvalidParameterError("new diagonal entry must be positive")
    indices = cache.assigned_indices + [int(new_index)]
    cov = np.empty((n + 1, n + 1))
    cov[:n, :n] = cache.cov
    cov[:n, n] = column
    cov[n, :n] = column
    cov[n, n] = diagonal
    if n == 0:
        return ExpertPosteriorCache(indices, cov, np.array([[1.0 / diagonal]]), math.log(diagonal), 1)
    Dc = cache.cov_inverse @ column
    schur = diagonal - column @ Dc
    if schur <= PIVOT_TOL:
        return _refactorize(indices, cov, f"update Schur complement {schur:.3g} too small")
    if cache.ops_since_refresh + 1 >= REFRESH_EVERY:
        return _refactorize(indices, cov)
    a = 1.0 / schur
    c = -Dc * a
    inv = np.empty_like(cov)
    inv[:n, :n] = cache.cov_inverse - np.outer(Dc, c)
    inv[:n, n] = c
    inv[n, :n] = c
    inv[n, n] = a
    return ExpertPosteriorCache(
        indices, cov, inv, cache.log_det + math.log(schur), cache.ops_since_refresh + 1
    )


def cache_predictive(X_star, cache: ExpertPosteriorCache, X, y, hyper: ExpertHyper):
    """Vectorized predictive (means, variances) at rows of ``X_star`` from a cache."""
    X_star = np.atleast_2d(X_star)
    prior_var = hyper.output_scale + hyper.noise_var
    if len(cache) == 0:
        m = X_star.shape[0]
        return np.zeros(m), np.full(m, prior_var)
    Xi = X[cache.assigned_indices]
    k = hyper.output_scale * correlation_matrix(X_star, Xi, hyper.length_scales)
    means = k @ (cache.cov_inverse @ y[cache.assigned_indices])
    var = prior_var - np.einsum("ij,jk,ik->i", k, cache.cov_inverse, k)
    return means, np.maximum(var, hyper.noise_var)


def leave_one_out(cache: ExpertPosteriorCache, position: int, y_sub, jitter: float = JITTER):
    """Predictive of the cached point at ``position`` given the others.

    Uses the standard identities mean = y_j - [K^-1 y]_j / [K^-1]_jj and
    var = 1 / [K^-1]_jj, with the factorization jitter removed from var.
    """
    inv = cache.cov_inverse
    a = inv[position, position]
    mean = y_sub[position] - float(inv[position] @ y_sub) / a
    return mean, 1.0 / a - jitter

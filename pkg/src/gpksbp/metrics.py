"""Posterior predictive mixtures and the RMSE, NLPD and CRPS scores.

Every retained MCMC record defines one Gaussian mixture at each test input:
one component per instantiated expert plus a component for a GP drawn fresh
from the priors that takes the leftover gating mass.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .gp_expert import build_cache, cache_predictive
from .hyper_sampler import Priors
from .ksbp_gating import GatingState, weights_matrix
from .rg_baseline import occupation_matrix

DENSITY_FLOOR = 1e-300
_SQRT2PI = math.sqrt(2.0 * math.pi)


@dataclass
class PredictiveMixture:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.means = np.asarray(self.means, dtype=float)
        self.variances = np.asarray(self.variances, dtype=float)
        if not (self.weights.shape == self.means.shape == self.variances.shape):
            raise ValueError("weights, means and variances must have the same length")
        if np.any(self.variances <= 0):
            raise ValueError("component variances must be positive")

    @property
    def mean(self) -> float:
        return float(self.weights @ self.means)

    @property
    def variance(self) -> float:
        m = self.mean
        return float(self.weights @ (self.variances + (self.means - m) ** 2))

    def density(self, y) -> float:
        return float(mixture_density(self.weights, self.means, self.variances, y))

    def cdf(self, y) -> float:
        sd = np.sqrt(self.variances)
        return float(self.weights @ ndtr((y - self.means) / sd))


def record_mixtures(X_star, record, X, y, priors: Priors, rng, model: str = "gpksbp"):
    """(weights, means, variances) arrays of shape (T, K) for one record.

    The last column is the fresh-prior component; its hyperparameters are
    drawn once for the whole record.
    """
    X_star = np.atleast_2d(np.asarray(X_star, dtype=float))
    T = X_star.shape[0]
    K = record.i_star
    if model == "gpksbp":
        gating = GatingState(record.r, record.alpha or 1, record.beta, record.v, record.h, K)
        w, rest = weights_matrix(X_star, gating)
    elif model == "rg":
        N = record.assignments.size
        share = occupation_matrix(X_star, X, record.assignments, record.r, K)
        w = share * (N / (N + record.beta))
        rest = np.full(T, record.beta / (N + record.beta))
    else:
        raise ValueError(f"unknown model {model!r}")
    means = np.zeros((T, K + 1))
    variances = np.empty((T, K + 1))
    for i, hyper in enumerate(record.hypers):
        idx = np.flatnonzero(record.assignments == i)
        cache = build_cache(idx, X, hyper)
        means[:, i], variances[:, i] = cache_predictive(X_star, cache, X, y, hyper)
    fresh = priors.sample_hyper(rng, X_star.shape[1])
    variances[:, K] = fresh.output_scale + fresh.noise_var
    weights = np.concatenate([w, np.asarray(rest).reshape(T, 1)], axis=1)
    return weights, means, variances


def predictive_mixture(x_star, record, X, y, priors: Priors, rng, model: str = "gpksbp") -> PredictiveMixture:
    W, M, V = record_mixtures(x_star, record, X, y, priors, rng, model)
    return PredictiveMixture(W[0], M[0], V[0])


def mixture_density(weights, means, variances, y):
    """Gaussian-mixture density; mixtures run along the last axis."""
    y = np.asarray(y, dtype=float)[..., None]
    z = (y - means) ** 2 / variances
    return np.sum(weights * np.exp(-0.5 * z) / (_SQRT2PI * np.sqrt(variances)), axis=-1)


def psi(mu, var):
    """E|Z| for Z ~ N(mu, var): 2 sd phi(mu/sd) + mu (2 Phi(mu/sd) - 1)."""
    mu = np.asarray(mu, dtype=float)
    sd = np.sqrt(var)
    z = mu / sd
    return 2.0 * sd * np.exp(-0.5 * z * z) / _SQRT2PI + mu * (2.0 * ndtr(z) - 1.0)


def crps_batch(weights, means, variances, y):
    """Closed-form CRPS of Gaussian mixtures (mixtures along the last axis)."""
    W = np.asarray(weights, dtype=float)
    M = np.asarray(means, dtype=float)
    V = np.asarray(variances, dtype=float)
    y = np.asarray(y, dtype=float)[..., None]
    first = np.sum(W * psi(y - M, V), axis=-1)
    pair = psi(M[..., :, None] - M[..., None, :], V[..., :, None] + V[..., None, :])
    second = np.einsum("...i,...ij,...j->...", W, pair, W)
    return first - 0.5 * second


def crps(mixture: PredictiveMixture, y: float) -> float:
    return float(crps_batch(mixture.weights, mixture.means, mixture.variances, y))


def rmse(predictions, truths) -> float:
    p = np.asarray(predictions, dtype=float)
    t = np.asarray(truths, dtype=float)
    if p.size == 0:
        raise ValueError("rmse of an empty set")
    if p.shape != t.shape:
        raise ValueError("predictions and truths differ in length")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def nlpd(densities, return_flag: bool = False):
    """Mean over test points of -log(mean over records of the density).

    ``densities`` is (S records, T points).  Densities below 1e-300 are
    clamped; ``return_flag`` also returns whether that happened.
    """
    d = np.atleast_2d(np.asarray(densities, dtype=float))
    if d.size == 0:
        raise ValueError("nlpd of an empty set")
    pooled = d.mean(axis=0)
    clamped = bool(np.any(pooled < DENSITY_FLOOR))
    if clamped:
        warnings.warn("predictive density underflow clamped at 1e-300", RuntimeWarning, stacklevel=2)
    value = float(-np.mean(np.log(np.maximum(pooled, DENSITY_FLOOR))))
    return (value, clamped) if return_flag else value


@dataclass
class TracePredictions:
    """Per-record mixtures stacked as (S, T, K_max); unused slots have zero weight."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def record_means(self) -> np.ndarray:
        return np.sum(self.weights * self.means, axis=-1)

    def mean(self) -> np.ndarray:
        return self.record_means().mean(axis=0)

    def variance(self) -> np.ndarray:
        # every record contributes equally to one pooled mixture
        m = self.mean()[None, :, None]
        return np.mean(np.sum(self.weights * (self.variances + (self.means - m) ** 2), axis=-1), axis=0)

    def densities(self, y) -> np.ndarray:
        return mixture_density(self.weights, self.means, self.variances, np.asarray(y)[None, :])

    def crps(self, y) -> np.ndarray:
        # one record at a time: the pairwise term is (T, K, K) per record
        y = np.asarray(y, dtype=float)
        return np.stack([crps_batch(w, m, v, y) for w, m, v in zip(self.weights, self.means, self.variances)])


def predict_trace(trace, X, y, X_star, priors: Priors, rng) -> TracePredictions:
    parts = [record_mixtures(X_star, rec, X, y, priors, rng, trace.model) for rec in trace.records]
    K = max(p[0].shape[1] for p in parts)
    S, T = len(parts), np.atleast_2d(X_star).shape[0]
    W = np.zeros((S, T, K))
    M = np.zeros((S, T, K))
    V = np.ones((S, T, K))
    for s, (w, m, v) in enumerate(parts):
        k = w.shape[1]
        W[s, :, :k], M[s, :, :k], V[s, :, :k] = w, m, v
    return TracePredictions(W, M, V)


def score_trace(trace, X, y, X_test, y_test, priors: Priors, rng, per_record_rmse: bool = False) -> dict:
    """RMSE, NLPD and CRPS of a trace's predictive mixtures on a test set.

    RMSE scores the grand mean over records unless ``per_record_rmse``, in
    which case each record is scored separately and the scores averaged.
    CRPS is computed per record and averaged over records and test points.
    """
    pred = predict_trace(trace, X, y, X_test, priors, rng)
    if per_record_rmse:
        err = float(np.mean([rmse(m, y_test) for m in pred.record_means()]))
    else:
        err = rmse(pred.mean(), y_test)
    value, clamped = nlpd(pred.densities(y_test), return_flag=True)
    return {
        "rmse": err,
        "nlpd": value,
        "crps": float(np.mean(pred.crps(y_test))),
        "density_clamped": clamped,
    }

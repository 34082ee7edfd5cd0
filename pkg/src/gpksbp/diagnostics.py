"""Monte Carlo error estimates and the joint-distribution (Geweke) check.

The check compares two ways of drawing from the joint prior of parameters and
responses for a fixed input design: independent ancestral draws, and a
successive-conditional chain that alternates one Gibbs sweep with a fresh
draw of y given the parameters.  Both must agree on any marginal moment.
"""
from __future__ import annotations

import numpy as np

from .gp_expert import covariance_matrix
from .ksbp_gating import stick_weights


def batch_means_se(x, n_batches: int = 50) -> float:
    """Standard error of the mean of a correlated series by batch means."""
    x = np.asarray(x, dtype=float)
    size = x.size // n_batches
    if size < 1:
        raise ValueError("series too short for the requested number of batches")
    means = x[: size * n_batches].reshape(n_batches, size).mean(axis=1)
    return float(means.std(ddof=1) / np.sqrt(n_batches))


def draw_responses(X, assignments, hypers, rng) -> np.ndarray:
    """y ~ independent zero-mean GPs, one per expert, over its assigned points."""
    y = np.empty(assignments.size)
    for i in np.unique(assignments):
        idx = np.flatnonzero(assignments == i)
        K = covariance_matrix(X[idx], hypers[i])
        y[idx] = np.linalg.cholesky(K) @ rng.standard_normal(idx.size)
    return y


def ancestral_draw(X, priors, rng) -> dict:
    """One draw of (r, alpha, beta, sticks, s, theta, y) from the prior.

    Sticks are generated until the leftover mass at every input is below
    1e-12, then each s_n is drawn from its categorical weights.
    """
    N, D = X.shape
    r = rng.gamma(*priors.kernel_width)
    alpha = int(rng.geometric(priors.geometric.p_alpha))
    beta = int(rng.geometric(priors.geometric.p_beta))
    v, h = [], []
    rest = np.ones(N)
    while rest.max() > 1e-12:
        v.append(rng.beta(alpha, beta))
        h.append(rng.random(D))
        rest = rest * (1.0 - v[-1] * np.exp(-np.sum((X - h[-1]) ** 2, axis=1) / r**2))
    kap = np.exp(-np.sum((X[:, None, :] - np.array(h)[None]) ** 2, axis=2) / r**2)
    w, rest = stick_weights(kap, np.array(v))
    s = np.array([rng.choice(w.shape[1], p=row / row.sum()) for row in w])
    hypers = {int(i): priors.sample_hyper(rng, D) for i in np.unique(s)}
    y = draw_responses(X, s, hypers, rng)
    return {"r": r, "alpha": alpha, "beta": beta, "assignments": s, "y": y}


def successive_conditional(sampler, n_sweeps: int, rng, record=("r", "alpha")) -> dict:
    """Alternate Gibbs sweeps with y | parameters; returns recorded series."""
    out = {k: np.empty(n_sweeps) for k in record}
    for m in range(n_sweeps):
        sampler.sweep()
        st = sampler.state
        hypers = {i: e.hyper for i, e in enumerate(st.experts)}
        sampler.y = draw_responses(sampler.X, st.assignments, hypers, rng)
        g = st.gating
        values = {"r": g.kernel_width, "alpha": g.alpha, "beta": g.beta_param, "i_star": g.truncation_level}
        for k in record:
            out[k][m] = values[k]
    return out

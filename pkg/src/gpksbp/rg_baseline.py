"""Infinite mixture of GP experts with an input-dependent occupation-number gate.

This is the comparison model: a Dirichlet-process style allocation where the
count of points in each expert is replaced by a kernel-weighted count around
the point being allocated.  Assignments use Neal's algorithm 8 with a single
auxiliary expert, the gate width r is moved by HMC on a pseudo-posterior and
the concentration beta has a conjugate gamma update.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import InvalidParameterError, InvalidStateError
from .gibbs import (
    ChainTrace,
    Expert,
    TraceRecord,
    _Acceptance,
    _log_normal,
    _unpack,
    check_partition,
    drive_chain,
    update_expert_hyper,
    validate_schedule,
)
from .gp_expert import (
    JITTER,
    build_cache,
    cache_predictive,
    correlation_matrix,
    leave_one_out,
    rank1_downdate,
    rank1_update,
)
from .hmc import AdapterBank, DualAveraging, HmcConfig, hmc_sample
from .hyper_sampler import Priors, gamma_log_prior_grad
from .ksbp_gating import sq_distances
from .streams import substream


@dataclass
class RgState:
    assignments: np.ndarray
    kernel_width: float
    beta: float
    experts: list
    iteration: int = 0


def occupation_number(n, i, assignments, X, r) -> float:
    """(N-1) times the kernel-weighted share of the other points sitting in expert ``i``."""
    s = np.asarray(assignments)
    N = s.size
    if N < 2:
        raise InvalidParameterError("occupation numbers need at least two points")
    log_k = -sq_distances(X[n], X)[0] / (r * r)
    others = np.arange(N) != n
    denom = logsumexp(log_k[others])
    if not np.isfinite(denom):
        raise InvalidStateError("kernel weights of the other points sum to zero")
    members = others & (s == i)
    if not members.any():
        return 0.0
    return (N - 1) * math.exp(logsumexp(log_k[members]) - denom)


def occupation_matrix(X_star, X, assignments, r, n_experts, exclude_self=False):
    """Kernel-weighted shares of each expert around every row of ``X_star``.

    Returns an (M, n_experts) array whose rows sum to one.  With
    ``exclude_self`` the rows of ``X_star`` must be the training points and
    each point is left out of its own row.
    """
    s = np.asarray(assignments)
    log_k = -sq_distances(X_star, X) / (r * r)
    if exclude_self:
        np.fill_diagonal(log_k, -np.inf)
    log_k -= log_k.max(axis=1, keepdims=True)
    k = np.exp(log_k)
    totals = np.zeros((k.shape[0], n_experts))
    for i in range(n_experts):
        totals[:, i] = k[:, s == i].sum(axis=1)
    return totals / totals.sum(axis=1, keepdims=True)


def make_rg_r_target(assignments, X, prior=(2.0, 0.5)):
    """Closure r -> (log pseudo-posterior, d/dr).

    Each point contributes log N_{-n,s_n}; a point that is alone in its
    expert can only have been allocated to a new expert, whose branch does
    not involve r, so it adds a constant.
    """
    s = np.asarray(assignments)
    N = s.size
    sq = sq_distances(X, X)
    off = ~np.eye(N, dtype=bool)
    same = (s[:, None] == s[None, :]) & off
    has_mates = same.any(axis=1)
    sq_m = sq[has_mates]
    off_m = off[has_mates]
    same_m = same[has_mates]
    p1, p2 = prior

    def target(r):
        r = float(np.asarray(r).reshape(-1)[0])
        lp0, g0 = gamma_log_prior_grad(r, p1, p2)
        if not has_mates.any():
            return lp0, np.array([g0])
        L = -sq_m / (r * r)
        L_all = np.where(off_m, L, -np.inf)
        L_mem = np.where(same_m, L, -np.inf)
        lse_all = logsumexp(L_all, axis=1, keepdims=True)
        lse_mem = logsumexp(L_mem, axis=1, keepdims=True)
        lp = float(np.sum(lse_mem - lse_all))
        # d/dr log sum kappa = (2 / r^3) * kappa-weighted mean of squared distances
        e_all = np.sum(np.exp(L_all - lse_all) * sq_m, axis=1)
        e_mem = np.sum(np.exp(L_mem - lse_mem) * sq_m, axis=1)
        grad = 2.0 / r**3 * float(np.sum(e_mem - e_all))
        return lp + lp0, np.array([grad + g0])

    return target


def rg_r_log_pseudo_posterior_grad(r, assignments, X, prior=(2.0, 0.5)):
    lp, grad = make_rg_r_target(assignments, X, prior)(r)
    return lp, float(grad[0])


def beta_branch_probability(gamma_a, num_occupied, N, rate) -> float:
    """q = odds / (1 + odds) with odds = (a + |e| - 1) / (N * rate)."""
    odds = (gamma_a + num_occupied - 1) / (N * rate)
    return odds / (1.0 + odds)


def rg_sample_beta(beta, num_occupied, N, gamma_a, gamma_b, rng) -> float:
    """Conjugate concentration update via the auxiliary phi ~ Beta(beta + 1, N).

    ``gamma_b`` is the rate of the gamma prior.
    """
    if num_occupied < 1:
        raise InvalidParameterError("at least one occupied expert is required")
    phi = rng.beta(beta + 1.0, N)
    rate = gamma_b - math.log(phi)
    q = beta_branch_probability(gamma_a, num_occupied, N, rate)
    shape = gamma_a + num_occupied if rng.random() < q else gamma_a + num_occupied - 1
    return float(rng.gamma(shape, 1.0 / rate))


def _remove_expert(state: RgState, i: int) -> None:
    del state.experts[i]
    s = state.assignments
    s[s > i] -= 1


def _logsumexp(a) -> float:
    m = a.max() if a.size else -np.inf
    if not np.isfinite(m):
        return m
    return float(m + math.log(np.exp(a - m).sum()))


def rg_sample_assignment(n, state: RgState, X, y, priors: Priors, rng, log_kernel_row=None) -> int:
    """Neal's algorithm 8 with one auxiliary expert for point ``n``.

    If ``n`` sits alone in its expert, that expert's hyperparameters serve as
    the auxiliary; otherwise the auxiliary is drawn from the priors.  Point
    ``n`` is scored against its own expert leave-one-out, so caches change
    only when the point actually moves.  ``log_kernel_row`` may carry
    -||x_n - x_m||^2 / r^2 for all m.
    """
    s = state.assignments
    N = s.size
    if N < 2:
        raise InvalidParameterError("allocation needs at least two points")
    current = int(s[n])
    experts = state.experts
    alone = experts[current].size == 1
    if alone:
        aux_hyper = experts[current].hyper
    else:
        # a zero concentration never opens an expert, so skip the draw
        aux_hyper = priors.sample_hyper(rng, X.shape[1]) if state.beta > 0 else None

    if log_kernel_row is None:
        log_kernel_row = -sq_distances(X[n], X)[0] / state.kernel_width**2
    others = np.arange(N) != n
    log_denom = _logsumexp(log_kernel_row[others])
    K = len(experts)
    logw = np.full(K + 1, -np.inf)
    for i, expert in enumerate(experts):
        if i == current and alone:
            continue
        members = others & (s == i)
        log_occ = math.log(N - 1) + _logsumexp(log_kernel_row[members]) - log_denom
        if not np.isfinite(log_occ):
            continue
        if i == current:
            cache = expert.cache
            mean, var = leave_one_out(cache, cache.position(n), y[cache.assigned_indices])
        else:
            means, variances = cache_predictive(X[n], expert.cache, X, y, expert.hyper)
            mean, var = means[0], variances[0]
        logw[i] = log_occ + _log_normal(y[n], mean, max(var, 1e-300))
    if state.beta > 0:
        logw[K] = math.log(state.beta) + _log_normal(y[n], 0.0, aux_hyper.output_scale + aux_hyper.noise_var)
    if not np.isfinite(logw.max()):
        raise InvalidStateError(f"point {n} has no admissible expert")
    cum = np.cumsum(np.exp(logw - logw.max()))
    new = min(int(np.searchsorted(cum, rng.random() * cum[-1], side="right")), K)
    if new == current or (alone and new == K):
        return current

    experts[current].cache = rank1_downdate(experts[current].cache, n)
    if alone:
        _remove_expert(state, current)
        if new > current:
            new -= 1
    if new >= len(experts):
        expert = Expert(aux_hyper)
        expert.cache = build_cache([n], X, aux_hyper)
        experts.append(expert)
        new = len(experts) - 1
    else:
        target = experts[new]
        h = target.hyper
        idx = target.cache.assigned_indices
        column = h.output_scale * correlation_matrix(X[n], X[idx], h.length_scales)[0]
        target.cache = rank1_update(target.cache, n, column, h.output_scale + h.noise_var + JITTER)
    s[n] = new
    return new


def share_order(assignments, n_experts) -> np.ndarray:
    """Expert indices sorted by decreasing occupancy (ties keep index order)."""
    counts = np.bincount(assignments, minlength=n_experts)
    return np.argsort(-counts, kind="stable")


class RgSampler:
    model = "rg"

    def __init__(self, X, y, priors: Priors | None = None, hmc_config: HmcConfig | None = None,
                 rng=None, burn_in: int = 0):
        self.X = np.atleast_2d(np.asarray(X, dtype=float))
        self.y = np.asarray(y, dtype=float)
        if self.y.size < 2:
            raise InvalidParameterError("the occupation-number gate needs at least two points")
        self.priors = priors or Priors()
        self.config = hmc_config or HmcConfig()
        self.rng = rng if rng is not None else np.random.default_rng()
        self.adapt_until = self.config.adapt_until(burn_in)
        N, D = self.X.shape
        self.dim = D
        self.sq = sq_distances(self.X, self.X)
        expert = Expert(self.priors.mean_hyper(D))
        expert.cache = build_cache(range(N), self.X, expert.hyper)
        a, b = self.priors.rg_beta
        r = self.priors.kernel_width[0] * self.priors.kernel_width[1]
        self.state = RgState(np.zeros(N, dtype=int), r, a / b, [expert], 0)
        self.r_adapter = DualAveraging.from_config(self.config)
        self.theta_adapters = AdapterBank(self.config)
        self.acceptance = _Acceptance()

    def sweep(self) -> None:
        st = self.state
        X, y, rng, priors, cfg = self.X, self.y, self.rng, self.priors, self.config
        m = st.iteration + 1
        adapt = m <= self.adapt_until
        if m == self.adapt_until + 1:
            self.r_adapter.freeze()
            self.theta_adapters.freeze()

        target = make_rg_r_target(st.assignments, X, priors.kernel_width)
        res = hmc_sample(target, [st.kernel_width], cfg, rng, self.r_adapter, adapt)
        self.acceptance.add("r", res)
        st.kernel_width = float(res.value[0])

        a, b = priors.rg_beta
        st.beta = rg_sample_beta(st.beta, len(st.experts), y.size, a, b, rng)

        log_k = -self.sq / st.kernel_width**2
        for n in range(y.size):
            rg_sample_assignment(n, st, X, y, priors, rng, log_k[n])

        for i, expert in enumerate(st.experts):
            res = update_expert_hyper(expert, X, y, priors, cfg, rng, self.theta_adapters.get(i), adapt)
            self.acceptance.add("theta", res)
            if adapt:
                self.theta_adapters.record(res.accept_prob)
        st.iteration = m

    def record(self) -> TraceRecord:
        st = self.state
        order = share_order(st.assignments, len(st.experts))
        relabel = np.empty_like(order)
        relabel[order] = np.arange(order.size)
        return TraceRecord(
            iteration=st.iteration,
            r=st.kernel_width,
            beta=st.beta,
            hypers=[st.experts[i].hyper.copy() for i in order],
            assignments=relabel[st.assignments],
        )

    def check_invariants(self, tol: float = 1e-6) -> None:
        st = self.state
        if any(e.size == 0 for e in st.experts):
            raise InvalidStateError("an expert without points survived compaction")
        check_partition(st.experts, st.assignments, self.y.size, self.X, tol)


def run_rg_chain(data, priors: Priors | None = None, hmc_config: HmcConfig | None = None,
                 total_iterations: int = 20_000, rng_seed: int = 0, burn_in: int | None = None,
                 thin: int = 1, progress=None) -> ChainTrace:
    """Run the comparison sampler; same calling convention as :func:`gpksbp.gibbs.run_chain`."""
    X, y = _unpack(data)
    burn_in = total_iterations // 2 if burn_in is None else burn_in
    validate_schedule(total_iterations, burn_in, thin)
    sampler = RgSampler(X, y, priors, hmc_config, substream(rng_seed, "chain"), burn_in)
    return drive_chain(sampler, total_iterations, burn_in, thin, progress)

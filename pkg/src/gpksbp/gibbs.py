"""Within-Gibbs sampler for the KSBP mixture of GP experts.

One sweep updates, in order: the kernel width r (HMC), the sticks through the
slice-sampled stick loop, the integer beta parameters (rejection sampling),
every assignment s_n, and finally each expert's hyperparameters (HMC).
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError, InvalidStateError, NumericalError
from .gp_expert import (
    JITTER,
    ExpertHyper,
    ExpertPosteriorCache,
    build_cache,
    cache_predictive,
    correlation_matrix,
    leave_one_out,
    lml_and_gradient,
    rank1_downdate,
    rank1_update,
    spd_inverse,
    squared_differences,
)
from .hmc import AdapterBank, DualAveraging, HmcConfig, hmc_sample
from .hyper_sampler import (
    Priors,
    draw_b_indicators,
    rejection_sample_alpha,
    rejection_sample_beta,
    sample_kernel_width,
)
from .ksbp_gating import GatingState, SliceAuxiliaries, stick_loop, weights_matrix
from .streams import substream


@dataclass
class Expert:
    hyper: ExpertHyper
    cache: ExpertPosteriorCache = field(default_factory=ExpertPosteriorCache)

    @property
    def size(self) -> int:
        return len(self.cache)

    def rebuild(self, X) -> None:
        self.cache = build_cache(self.cache.assigned_indices, X, self.hyper)


def _log_normal(y, mean, var):
    return -0.5 * (math.log(2.0 * math.pi * var) + (y - mean) ** 2 / var)


def point_log_predictive(n, expert: Expert, X, y, is_member: bool) -> float:
    """log p(y_n | other points of the expert, theta).

    Members are scored leave-one-out from the cached inverse; an expert with
    no other points falls back to N(0, sigma^2 + tau^2).
    """
    hyper = expert.hyper
    cache = expert.cache
    others = len(cache) - (1 if is_member else 0)
    if others == 0:
        return _log_normal(y[n], 0.0, hyper.output_scale + hyper.noise_var)
    if is_member:
        mean, var = leave_one_out(cache, cache.position(n), y[cache.assigned_indices])
    else:
        means, variances = cache_predictive(X[n], cache, X, y, hyper)
        mean, var = means[0], variances[0]
    return _log_normal(y[n], mean, max(var, 1e-300))


def move_point(n, src: int, dst: int, experts, X, jitter: float = JITTER) -> None:
    """Move point ``n`` between experts with rank-1 cache maintenance."""
    experts[src].cache = rank1_downdate(experts[src].cache, n)
    target = experts[dst]
    hyper = target.hyper
    idx = target.cache.assigned_indices
    if idx:
        column = hyper.output_scale * correlation_matrix(X[n], X[idx], hyper.length_scales)[0]
    else:
        column = np.zeros(0)
    diagonal = hyper.output_scale + hyper.noise_var + jitter
    target.cache = rank1_update(target.cache, n, column, diagonal)


def sample_assignment(n, u_n, weights_row, experts, X, y, assignments, rng) -> int:
    """Resample s_n among experts whose weight at x_n exceeds the slice u_n.

    Updates ``assignments`` and the affected caches in place and returns the
    new expert index.
    """
    candidates = np.flatnonzero(u_n < np.asarray(weights_row))
    if candidates.size == 0:
        raise InvalidStateError(f"point {n} has no expert above its slice level")
    current = int(assignments[n])
    if candidates.size == 1:
        new = int(candidates[0])
    else:
        logp = np.array([
            point_log_predictive(n, experts[i], X, y, i == current) for i in candidates
        ])
        p = np.exp(logp - logp.max())
        p /= p.sum()
        new = int(candidates[rng.choice(candidates.size, p=p)])
    if new != current:
        move_point(n, current, new, experts, X)
        assignments[n] = new
    return new


def make_theta_target(X_sub, y_sub, priors: Priors):
    """Log posterior of one expert's hyperparameters and its gradient.

    The parameter vector is (sigma^2, l_1..l_D, tau^2), without tau^2 when
    the priors pin the noise.
    """
    sq = squared_differences(X_sub)
    y_sub = np.asarray(y_sub, dtype=float)
    fixed = priors.fixed_noise

    def target(theta):
        try:
            if fixed is None:
                hyper = ExpertHyper.from_vector(theta)
            else:
                hyper = ExpertHyper(theta[0], theta[1:], fixed)
            lml, grad = lml_and_gradient(None, y_sub, hyper, sq=sq)
        except (InvalidParameterError, NumericalError):
            return -np.inf, np.zeros_like(theta)
        if fixed is not None:
            grad = grad[:-1]
        lp, gp = priors.theta_log_prior_grad(theta)
        return lml + lp, grad + gp

    return target


def hyper_vector(hyper: ExpertHyper, priors: Priors) -> np.ndarray:
    theta = hyper.to_vector()
    return theta[:-1] if priors.fixed_noise is not None else theta


def vector_hyper(theta, priors: Priors) -> ExpertHyper:
    if priors.fixed_noise is not None:
        return ExpertHyper(theta[0], theta[1:], priors.fixed_noise)
    return ExpertHyper.from_vector(theta)


def update_expert_hyper(expert: Expert, X, y, priors: Priors, config: HmcConfig, rng,
                        adapter=None, adapt=False):
    idx = expert.cache.assigned_indices
    target = make_theta_target(X[idx], y[idx], priors)
    res = hmc_sample(target, hyper_vector(expert.hyper, priors), config, rng, adapter, adapt)
    if res.accepted:
        expert.hyper = vector_hyper(res.value, priors)
        expert.rebuild(X)
    return res


def resample_empty_expert_hypers(experts, priors: Priors, rng, dim=None):
    """Redraw hyperparameters of every expert with no assigned points."""
    for expert in experts:
        if expert.size == 0:
            d = dim if dim is not None else expert.hyper.dim
            expert.hyper = priors.sample_hyper(rng, d)
    return experts


@dataclass
class TraceRecord:
    iteration: int
    r: float
    beta: float
    hypers: list
    assignments: np.ndarray
    alpha: int | None = None
    v: np.ndarray | None = None
    h: np.ndarray | None = None

    @property
    def i_star(self) -> int:
        return len(self.hypers)

    def shares(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.i_star) / max(self.assignments.size, 1)


@dataclass
class ChainTrace:
    model: str
    total_iterations: int
    burn_in: int
    thin: int
    records: list = field(default_factory=list)
    stats: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    @staticmethod
    def retained_iterations(total_iterations, burn_in, thin):
        return [m for m in range(burn_in + 1, total_iterations + 1) if (m - burn_in) % thin == 0]


def validate_schedule(total_iterations, burn_in, thin):
    if not 0 <= burn_in < total_iterations:
        raise ValueError("burn_in must lie in [0, total_iterations)")
    if thin < 1 or (total_iterations - burn_in) % thin:
        raise ValueError("thin must divide total_iterations - burn_in")


@dataclass
class ChainState:
    assignments: np.ndarray
    gating: GatingState
    aux: SliceAuxiliaries | None
    experts: list
    iteration: int = 0


class _Acceptance:
    def __init__(self):
        self.sums = {}
        self.counts = {}
        self.failures = 0

    def add(self, key, result):
        self.sums[key] = self.sums.get(key, 0.0) + result.accept_prob
        self.counts[key] = self.counts.get(key, 0) + 1
        self.failures += int(result.failed)

    def summary(self):
        out = {f"accept_{k}": self.sums[k] / self.counts[k] for k in self.sums}
        out["hmc_failures"] = self.failures
        return out


class GpksbpSampler:
    """Holds the chain state and performs one sweep at a time."""

    model = "gpksbp"

    def __init__(self, X, y, priors: Priors | None = None, hmc_config: HmcConfig | None = None,
                 rng=None, burn_in: int = 0):
        self.X = np.atleast_2d(np.asarray(X, dtype=float))
        self.y = np.asarray(y, dtype=float)
        self.priors = priors or Priors()
        self.config = hmc_config or HmcConfig()
        self.rng = rng if rng is not None else np.random.default_rng()
        self.adapt_until = self.config.adapt_until(burn_in)
        N, D = self.X.shape
        self.dim = D
        geo = self.priors.geometric
        alpha = max(1, round(1.0 / geo.p_alpha))
        beta = max(1, round(1.0 / geo.p_beta))
        r = self.priors.kernel_width[0] * self.priors.kernel_width[1]
        v1 = self.rng.beta(alpha, beta)
        h1 = self.rng.random(D)
        gating = GatingState(r, alpha, beta, [v1], h1[None, :], 1)
        expert = Expert(self.priors.mean_hyper(D))
        expert.cache = build_cache(range(N), self.X, expert.hyper)
        self.state = ChainState(np.zeros(N, dtype=int), gating, None, [expert], 0)
        self.r_adapter = DualAveraging.from_config(self.config)
        self.h_adapters = AdapterBank(self.config)
        self.theta_adapters = AdapterBank(self.config)
        self.acceptance = _Acceptance()

    def _freeze(self):
        self.r_adapter.freeze()
        self.h_adapters.freeze()
        self.theta_adapters.freeze()

    def sweep(self) -> None:
        st = self.state
        X, y, rng, priors, cfg = self.X, self.y, self.rng, self.priors, self.config
        m = st.iteration + 1
        adapt = m <= self.adapt_until
        if m == self.adapt_until + 1:
            self._freeze()

        # kernel width, given B indicators drawn for the current sticks
        B = draw_b_indicators(X, st.gating, st.assignments, rng)
        res = sample_kernel_width(
            st.gating.kernel_width, B, st.gating.h, X, st.assignments,
            priors.kernel_width, cfg, rng, self.r_adapter, adapt,
        )
        self.acceptance.add("r", res)
        st.gating.kernel_width = float(res.value[0])

        gating, aux = stick_loop(X, st.gating, st.assignments, rng, cfg, self.h_adapters, adapt)
        alpha = rejection_sample_alpha(gating.beta_param, gating.v, priors.geometric.p_alpha, rng)
        beta = rejection_sample_beta(alpha, gating.v, priors.geometric.p_beta, rng)
        gating.alpha, gating.beta_param = alpha, beta
        st.gating, st.aux = gating, aux

        i_star = gating.truncation_level
        experts = st.experts
        if any(e.size for e in experts[i_star:]):
            raise InvalidStateError("an occupied expert lies beyond the truncation level")
        del experts[i_star:]
        while len(experts) < i_star:
            experts.append(Expert(priors.sample_hyper(rng, self.dim)))
        resample_empty_expert_hypers(experts, priors, rng, self.dim)

        W, _ = weights_matrix(X, gating)
        for n in range(y.size):
            sample_assignment(n, aux.u[n], W[n], experts, X, y, st.assignments, rng)

        for i, expert in enumerate(experts):
            if expert.size:
                res = update_expert_hyper(
                    expert, X, y, priors, cfg, rng, self.theta_adapters.get(i), adapt
                )
                self.acceptance.add("theta", res)
                if adapt:
                    self.theta_adapters.record(res.accept_prob)
            else:
                expert.hyper = priors.sample_hyper(rng, self.dim)
        st.iteration = m

    def record(self) -> TraceRecord:
        st = self.state
        g = st.gating
        return TraceRecord(
            iteration=st.iteration,
            r=g.kernel_width,
            beta=g.beta_param,
            hypers=[e.hyper.copy() for e in st.experts],
            assignments=st.assignments.copy(),
            alpha=g.alpha,
            v=g.v.copy(),
            h=g.h.copy(),
        )

    def check_invariants(self, tol: float = 1e-6) -> None:
        st = self.state
        N = self.y.size
        if st.assignments.size and st.assignments.max() >= st.gating.truncation_level:
            raise InvalidStateError("assignment beyond truncation level")
        check_partition(st.experts, st.assignments, N, self.X, tol)


def check_partition(experts, assignments, N, X, tol=1e-6):
    seen = []
    for i, expert in enumerate(experts):
        idx = expert.cache.assigned_indices
        if any(assignments[n] != i for n in idx):
            raise InvalidStateError(f"expert {i} caches points assigned elsewhere")
        seen.extend(idx)
        if idx:
            direct, _ = spd_inverse(build_cache(idx, X, expert.hyper).cov)
            if np.max(np.abs(direct - expert.cache.cov_inverse)) > tol * max(1.0, np.max(np.abs(direct))):
                raise InvalidStateError(f"expert {i} cache drifted from direct inversion")
    if sorted(seen) != list(range(N)):
        raise InvalidStateError("expert memberships do not partition the data")


def _unpack(data):
    if hasattr(data, "X_train"):
        return data.X_train, data.y_train
    X, y = data
    return X, y


def drive_chain(sampler, total_iterations, burn_in, thin, progress=None) -> ChainTrace:
    """Run a prepared sampler and collect the retained records."""
    validate_schedule(total_iterations, burn_in, thin)
    trace = ChainTrace(sampler.model, total_iterations, burn_in, thin)
    start = time.perf_counter()
    for m in range(1, total_iterations + 1):
        try:
            sampler.sweep()
        except (InvalidStateError, NumericalError) as exc:
            raise type(exc)(f"iteration {m}: {exc}") from exc
        if m > burn_in and (m - burn_in) % thin == 0:
            trace.records.append(sampler.record())
        if progress is not None:
            progress(m, sampler)
    trace.stats = sampler.acceptance.summary()
    trace.stats["seconds"] = time.perf_counter() - start
    return trace


def run_chain(data, priors: Priors | None = None, hmc_config: HmcConfig | None = None,
              total_iterations: int = 20_000, rng_seed: int = 0, burn_in: int | None = None,
              thin: int = 1, progress=None) -> ChainTrace:
    """Run the GPKSBP sampler on pre-processed data.

    ``data`` is a :class:`~gpksbp.datasets.Dataset` or an (X, y) pair of
    normalized inputs and standardized responses.  ``burn_in`` defaults to
    half the chain.
    """
    X, y = _unpack(data)
    burn_in = total_iterations // 2 if burn_in is None else burn_in
    validate_schedule(total_iterations, burn_in, thin)
    sampler = GpksbpSampler(X, y, priors, hmc_config, substream(rng_seed, "chain"), burn_in)
    return drive_chain(sampler, total_iterations, burn_in, thin, progress)

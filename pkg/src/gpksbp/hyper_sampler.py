"""Samplers for the shared hyperparameters.

* the kernel width ``r`` (HMC on its posterior given the B indicators),
* the integer beta-prior parameters ``alpha`` and ``beta`` (exact rejection
  sampling with a flat-then-geometric envelope),
* the prior tables and gamma log-prior helpers used for every HMC target.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .errors import InvalidParameterError, InvalidStateError
from .gp_expert import ExpertHyper
from .hmc import HmcConfig, HmcResult, hmc_sample
from .ksbp_gating import sample_aux_column, sq_distances

MAX_PEAK = 1_000_000
MAX_ATTEMPTS = 100_000


@dataclass
class GeometricPriors:
    p_alpha: float = 0.5
    p_beta: float = 0.5

    def __post_init__(self):
        if not (0 < self.p_alpha < 1 and 0 < self.p_beta < 1):
            raise InvalidParameterError("geometric success probabilities must lie in (0, 1)")


@dataclass
class Priors:
    """Prior table shared by both models.

    Gamma priors are (shape, scale).  ``rg_beta`` is the RG concentration
    prior as (shape, rate).  ``fixed_noise`` pins tau^2 instead of learning it.
    """

    output_scale: tuple = (2.0, 2.0)
    length_scale: tuple = (2.0, 0.5)
    noise_var: tuple = (2.0, 0.5)
    kernel_width: tuple = (2.0, 0.5)
    geometric: GeometricPriors = field(default_factory=GeometricPriors)
    rg_beta: tuple = (2.0, 1.0)
    fixed_noise: float | None = None

    def __post_init__(self):
        for name in ("output_scale", "length_scale", "noise_var", "kernel_width", "rg_beta"):
            raw = getattr(self, name)
            try:
                pair = tuple(float(p) for p in raw)
            except (TypeError, ValueError):
                pair = ()
            if len(pair) != 2 or not all(math.isfinite(p) and p > 0 for p in pair):
                raise InvalidParameterError(f"{name}: expected two positive numbers, got {raw!r}")
            setattr(self, name, pair)
        if self.fixed_noise is not None and not self.fixed_noise > 0:
            raise InvalidParameterError("fixed_noise must be positive")

    def sample_hyper(self, rng, dim: int) -> ExpertHyper:
        sig2 = rng.gamma(*self.output_scale)
        ls = rng.gamma(self.length_scale[0], self.length_scale[1], size=dim)
        tau2 = self.fixed_noise if self.fixed_noise is not None else rng.gamma(*self.noise_var)
        return ExpertHyper(sig2, ls, tau2)

    def mean_hyper(self, dim: int) -> ExpertHyper:
        tau2 = self.fixed_noise if self.fixed_noise is not None else self.noise_var[0] * self.noise_var[1]
        return ExpertHyper(
            self.output_scale[0] * self.output_scale[1],
            np.full(dim, self.length_scale[0] * self.length_scale[1]),
            tau2,
        )

    def theta_log_prior_grad(self, theta):
        """Gamma log-prior and gradient over (sigma^2, l_1..l_D[, tau^2])."""
        theta = np.asarray(theta, dtype=float)
        shapes = np.empty(theta.size)
        scales = np.empty(theta.size)
        shapes[0], scales[0] = self.output_scale
        n_l = theta.size - 1 if self.fixed_noise is not None else theta.size - 2
        shapes[1:1 + n_l], scales[1:1 + n_l] = self.length_scale
        if self.fixed_noise is None:
            shapes[-1], scales[-1] = self.noise_var
        lp = float(np.sum((shapes - 1.0) * np.log(theta) - theta / scales))
        return lp, (shapes - 1.0) / theta - 1.0 / scales

    def to_dict(self) -> dict:
        return {
            "output_scale": list(self.output_scale),
            "length_scale": list(self.length_scale),
            "noise_var": list(self.noise_var),
            "kernel_width": list(self.kernel_width),
            "p_alpha": self.geometric.p_alpha,
            "p_beta": self.geometric.p_beta,
            "rg_beta": list(self.rg_beta),
            "fixed_noise": self.fixed_noise,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Priors":
        d = dict(d)
        geo = GeometricPriors(d.pop("p_alpha", 0.5), d.pop("p_beta", 0.5))
        kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(geometric=geo, **kwargs)


def gamma_log_prior_grad(theta: float, p1: float, p2: float):
    """Unnormalized gamma(shape p1, scale p2) log-density and its derivative."""
    if not theta > 0:
        raise InvalidParameterError("gamma prior evaluated at a non-positive value")
    return (p1 - 1.0) * math.log(theta) - theta / p2, (p1 - 1.0) / theta - 1.0 / p2


# ---------------------------------------------------------------- kernel width

def _mask(assignments, n_sticks):
    s = np.asarray(assignments)
    return s[:, None] >= np.arange(n_sticks)[None, :]


def make_r_target(B_sets, h_list, X, assignments, prior=(2.0, 0.5)):
    """Closure r -> (log posterior, d/dr) for the GPKSBP kernel width."""
    H = np.atleast_2d(h_list)
    mask = _mask(assignments, H.shape[0])
    sqd = sq_distances(X, H)[mask]
    B = np.asarray(B_sets)[mask].astype(float)
    success = B > 0
    p1, p2 = prior

    def target(r):
        r = float(np.asarray(r).reshape(-1)[0])
        lp0, g0 = gamma_log_prior_grad(r, p1, p2)
        if sqd.size == 0:
            return lp0, np.array([g0])
        q = sqd / (r * r)
        with np.errstate(divide="ignore", over="ignore"):
            lp = np.sum(np.where(success, -q, np.log(-np.expm1(-q))))
            coef = np.where(success, 1.0, -1.0 / np.expm1(q))
        grad = float(coef @ sqd) * 2.0 / r**3
        return float(lp) + lp0, np.array([grad + g0])

    return target


def r_log_posterior_grad_ksbp(r, B_sets, h_list, X, assignments, prior=(2.0, 0.5)):
    """Log posterior of r given B indicators (up to a constant) and d/dr.

    ``B_sets`` is the (N, i*) indicator array; only pairs with s_n >= i count.
    """
    lp, grad = make_r_target(B_sets, h_list, X, assignments, prior)(r)
    return lp, float(grad[0])


def draw_b_indicators(X, gating, assignments, rng):
    """Fresh B indicators for the current sticks given the assignments."""
    s = np.asarray(assignments)
    m = gating.v.size
    B = np.full((s.size, m), -1, dtype=np.int8)
    if s.size == 0:
        return B
    kap = np.exp(-sq_distances(X, gating.h) / gating.kernel_width**2)
    for i in range(m):
        _, B[:, i] = sample_aux_column(s, i, gating.v[i], kap[:, i], rng)
    return B


def sample_kernel_width(r, B_sets, h_list, X, assignments, prior, config: HmcConfig, rng,
                        adapter=None, adapt=False) -> HmcResult:
    target = make_r_target(B_sets, h_list, X, assignments, prior)
    return hmc_sample(target, [r], config, rng, adapter, adapt)


# ------------------------------------------------------------ alpha and beta

def log_pbar(k: int, other: int, i_star: int, log_c: float) -> float:
    """log of ((k+other-1)!/(k-1)!)^i* * c^(k-1), the unnormalized conditional."""
    return i_star * (math.lgamma(k + other) - math.lgamma(k)) + (k - 1) * log_c


def _peak(other: int, i_star: int, log_c: float) -> int:
    if log_c == -math.inf:
        return 1
    if not log_c < 0:
        raise InvalidStateError("(1 - p) * prod(v) must be below 1")

    def ratio_below_one(k):
        return i_star * math.log1p(other / k) + log_c < 0

    t = -log_c / i_star
    k = 1 if t > 700 else max(1, int(math.floor(other / math.expm1(t))) + 1)
    while k > 1 and ratio_below_one(k - 1):
        k -= 1
    steps = 0
    while not ratio_below_one(k):
        k += 1
        steps += 1
        if k > MAX_PEAK or steps > MAX_PEAK:
            raise InvalidStateError("peak search exceeded 1e6")
    return k


def alpha_peak(beta_param: int, i_star: int, prod_v: float, p_alpha: float) -> int:
    """Smallest alpha with ((alpha+beta)/alpha)^i* (1-p_alpha) prod(v) < 1."""
    if not 0 < prod_v < 1 or i_star < 1:
        raise InvalidParameterError("need prod_v in (0, 1) and i* >= 1")
    return _peak(beta_param, i_star, math.log1p(-p_alpha) + math.log(prod_v))


def log_envelope(k, knee: int, log_phi: float, log_p_peak: float):
    """log(c q(k)): flat at the peak height up to the knee, then geometric with ratio phi."""
    k = np.asarray(k)
    out = np.where(k <= knee, log_p_peak, log_p_peak + (k - knee) * log_phi)
    return float(out) if out.ndim == 0 else out


def _log_ratio(k, other, i_star, log_c):
    return i_star * math.log1p(other / k) + log_c


def _tail_odds(log_phi: float) -> float:
    # phi / (1 - phi) without overflow when phi is tiny
    return math.exp(log_phi) / -math.expm1(log_phi)


def envelope_parameters(other: int, i_star: int, log_c: float):
    """(peak, knee, log phi, log pbar(peak)) of the flat-then-geometric envelope.

    The flat part ends at knee = peak + m, and the tail decays with the
    target's ratio at the knee.  Because that ratio falls with k, any m >= 0
    gives a valid envelope; m = 0 is the textbook choice, but its tail can be
    arbitrarily heavy when the ratio at the peak is close to one, so m is
    picked from {0, 1, 2, 4, ...} to minimize the envelope's total mass.
    """
    peak = _peak(other, i_star, log_c)
    best = None
    m = 0
    while True:
        knee = peak + m
        log_phi = _log_ratio(knee, other, i_star, log_c)
        mass = knee + _tail_odds(log_phi)
        if best is None or mass < best[0]:
            best = (mass, knee, log_phi)
        if knee > mass or m > MAX_PEAK:
            break
        m = 1 if m == 0 else 2 * m
    _, knee, log_phi = best
    return peak, knee, log_phi, log_pbar(peak, other, i_star, log_c)


def _rejection_sample(other: int, i_star: int, log_c: float, rng) -> int:
    if log_c == -math.inf:
        return 1
    peak, knee, log_phi, log_p_peak = envelope_parameters(other, i_star, log_c)
    p_flat = knee / (knee + _tail_odds(log_phi))
    fail = -math.expm1(log_phi)  # 1 - phi
    for _ in range(MAX_ATTEMPTS):
        if rng.random() < p_flat:
            k = int(rng.integers(1, knee + 1))
            log_env = log_p_peak
        else:
            g = int(rng.geometric(fail))
            k = knee + g
            log_env = log_p_peak + g * log_phi
        if math.log(rng.random()) + log_env <= log_pbar(k, other, i_star, log_c):
            return k
    raise InvalidStateError(f"rejection sampler accepted nothing in {MAX_ATTEMPTS} attempts")


def _rejection_sample_many(other: int, i_star: int, log_c: float, size: int, rng) -> np.ndarray:
    # the scalar algorithm run on a batch: every slot proposes until it accepts
    out = np.ones(size, dtype=np.int64)
    if log_c == -math.inf:
        return out
    peak, knee, log_phi, log_p_peak = envelope_parameters(other, i_star, log_c)
    p_flat = knee / (knee + _tail_odds(log_phi))
    fail = -math.expm1(log_phi)
    todo = np.arange(size)
    for _ in range(MAX_ATTEMPTS):
        if todo.size == 0:
            return out
        m = todo.size
        flat = rng.random(m) < p_flat
        k = np.where(flat, rng.integers(1, knee + 1, m), knee + rng.geometric(fail, m))
        log_env = log_envelope(k, knee, log_phi, log_p_peak)
        log_p = i_star * (gammaln(k + other) - gammaln(k)) + (k - 1) * log_c
        accept = np.log(rng.random(m)) + log_env <= log_p
        out[todo[accept]] = k[accept]
        todo = todo[~accept]
    raise InvalidStateError(f"rejection sampler accepted nothing in {MAX_ATTEMPTS} attempts")


def alpha_log_c(v_list, p_alpha) -> float:
    v = np.asarray(v_list, dtype=float)
    with np.errstate(divide="ignore"):
        return math.log1p(-p_alpha) + float(np.sum(np.log(v)))


def beta_log_c(v_list, p_beta) -> float:
    v = np.asarray(v_list, dtype=float)
    with np.errstate(divide="ignore"):
        return math.log1p(-p_beta) + float(np.sum(np.log1p(-v)))


def rejection_sample_alpha(beta_param: int, v_list, p_alpha: float, rng, size: int | None = None):
    """Exact draw from p(alpha | beta, v_1..v_i*) under a geometric prior.

    With ``size`` an array of independent draws is returned.
    """
    if len(v_list) == 0:
        raise InvalidParameterError("need at least one stick")
    log_c = alpha_log_c(v_list, p_alpha)
    if size is not None:
        return _rejection_sample_many(int(beta_param), len(v_list), log_c, size, rng)
    return _rejection_sample(int(beta_param), len(v_list), log_c, rng)


def rejection_sample_beta(alpha: int, v_list, p_beta: float, rng, size: int | None = None):
    """Exact draw from p(beta | alpha, v_1..v_i*); mirror image of the alpha draw."""
    if len(v_list) == 0:
        raise InvalidParameterError("need at least one stick")
    log_c = beta_log_c(v_list, p_beta)
    if size is not None:
        return _rejection_sample_many(int(alpha), len(v_list), log_c, size, rng)
    return _rejection_sample(int(alpha), len(v_list), log_c, rng)

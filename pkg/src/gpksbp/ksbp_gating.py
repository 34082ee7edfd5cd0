"""Kernel stick-breaking gating.

Stick ``i`` claims a fraction ``v_i * kappa(x, h_i)`` of whatever mass the
earlier sticks left at input ``x``.  The posterior sampler works with two
Bernoulli indicators per (point, stick) pair, ``A`` for the ``v`` trial and
``B`` for the kernel trial, and a slice variable ``u`` per point that decides
how many sticks must be instantiated in a sweep.

Stick and expert indices are 0-based throughout the code.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidStateError, RunawayTruncationError
from .hmc import HmcConfig, hmc_sample_unit_box

MAX_TRUNCATION = 10_000


@dataclass
class GatingState:
    kernel_width: float
    alpha: int
    beta_param: int
    v: np.ndarray
    h: np.ndarray
    truncation_level: int

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=float).reshape(-1)
        self.h = np.asarray(self.h, dtype=float)
        if self.h.ndim == 1:
            self.h = self.h.reshape(self.v.size, -1) if self.v.size else self.h.reshape(0, self.h.size)
        if self.h.shape[0] != self.v.size:
            raise InvalidStateError("v and h must describe the same number of sticks")

    @property
    def sticks(self):
        return list(zip(self.v, self.h))

    def copy(self) -> "GatingState":
        return GatingState(
            self.kernel_width, self.alpha, self.beta_param,
            self.v.copy(), self.h.copy(), self.truncation_level,
        )


@dataclass
class SliceAuxiliaries:
    """Slice variables and indicators from one stick loop.

    ``A`` and ``B`` are (N, i*) int8 arrays; entries with s_n < i are -1
    because those pairs are never sampled.
    """

    u: np.ndarray
    A: np.ndarray
    B: np.ndarray


def kernel(x, h, r) -> float:
    """exp(-||x - h||^2 / r^2)."""
    d = np.asarray(x, dtype=float) - np.asarray(h, dtype=float)
    return float(np.exp(-np.dot(d, d) / (r * r)))


def sq_distances(X, H) -> np.ndarray:
    X = np.atleast_2d(X)
    H = np.atleast_2d(H)
    d = X[:, None, :] - H[None, :, :]
    return np.einsum("nmd,nmd->nm", d, d)


def kernel_matrix(X, H, r) -> np.ndarray:
    """kappa(x_n, h_i) for all pairs, shape (N, m)."""
    return np.exp(-sq_distances(X, H) / (r * r))


def stick_weights(kappa, v):
    """Weights and leftover mass from per-stick break probabilities.

    ``kappa`` has sticks along its last axis.  Returns (w, remainder) where
    remainder = prod_i (1 - v_i kappa_i), so that 1 - sum(w) = remainder.
    """
    breaks = np.asarray(v) * np.asarray(kappa)
    survive = np.cumprod(1.0 - breaks, axis=-1)
    before = np.concatenate([np.ones(breaks.shape[:-1] + (1,)), survive[..., :-1]], axis=-1)
    return breaks * before, survive[..., -1] if breaks.shape[-1] else np.ones(breaks.shape[:-1])


def mixture_weights(x, state: GatingState, up_to: int) -> np.ndarray:
    if up_to > state.v.size:
        raise InvalidStateError(f"only {state.v.size} sticks available, asked for {up_to}")
    if up_to == 0:
        return np.zeros(0)
    kap = kernel_matrix(np.atleast_2d(x), state.h[:up_to], state.kernel_width)[0]
    return stick_weights(kap, state.v[:up_to])[0]


def weights_matrix(X, state: GatingState):
    """(N, i*) gating weights and (N,) leftover mass for every row of X."""
    kap = kernel_matrix(X, state.h, state.kernel_width)
    return stick_weights(kap, state.v)


def _ab_from_uniform(draw, v, kap):
    # cells for s_n > i: (1,0) v(1-k), (0,1) (1-v)k, (0,0) (1-v)(1-k)
    z = 1.0 - v * kap
    if np.any(z <= 0.0):
        raise InvalidStateError("a stick with v*kappa = 1 cannot be passed over")
    p10 = v * (1.0 - kap) / z
    p01 = (1.0 - v) * kap / z
    A = draw < p10
    B = (~A) & (draw < p10 + p01)
    return A, B


def sample_aux_AB(n, i, s_n, v_i, kappa_ni, rng):
    """Draw (A_ni, B_ni) given that point ``n`` did not stop before stick ``i``."""
    if s_n < i:
        raise InvalidStateError(f"indicators for point {n} are undefined at stick {i} (s_n={s_n})")
    if s_n == i:
        return 1, 1
    A, B = _ab_from_uniform(rng.random(), v_i, kappa_ni)
    return int(A), int(B)


def sample_aux_column(s, i, v_i, kappa_col, rng):
    """Vectorized :func:`sample_aux_AB` over all points with s_n >= i.

    Returns int8 arrays (A, B) of length N with -1 where s_n < i.
    """
    s = np.asarray(s)
    A = np.full(s.size, -1, dtype=np.int8)
    B = np.full(s.size, -1, dtype=np.int8)
    here = s == i
    A[here] = 1
    B[here] = 1
    later = s > i
    if later.any():
        a, b = _ab_from_uniform(rng.random(int(later.sum())), v_i, kappa_col[later])
        A[later] = a
        B[later] = b
    return A, B


def posterior_v_params(i, aux: SliceAuxiliaries, assignments, alpha, beta_param):
    """Beta posterior (alpha + #successes, beta + #failures) for stick ``i``."""
    active = np.asarray(assignments) >= i
    col = aux.A[active, i] if aux.A.ndim == 2 else aux.A[active]
    successes = int(np.sum(col))
    return alpha + successes, beta_param + (int(active.sum()) - successes)


def h_log_posterior_grad(h, B_column, X_subset, r):
    """Log-density (up to a constant) of a stick location and its gradient.

    ``B_column`` and ``X_subset`` cover only points with s_n >= i.  The prior
    is uniform on the unit cube, so it contributes nothing inside.
    """
    h = np.asarray(h, dtype=float)
    if np.any(h < 0.0) or np.any(h > 1.0):
        return -np.inf, np.zeros_like(h)
    B = np.asarray(B_column, dtype=float)
    if B.size == 0:
        return 0.0, np.zeros_like(h)
    diff = np.atleast_2d(X_subset) - h
    q = np.einsum("nd,nd->n", diff, diff) / (r * r)
    with np.errstate(divide="ignore", over="ignore"):
        log_fail = np.log(-np.expm1(-q))
        coef = np.where(B > 0, 1.0, -1.0 / np.expm1(q))
    lp = float(np.sum(np.where(B > 0, -q, log_fail)))
    if not np.isfinite(lp):
        return -np.inf, np.zeros_like(h)
    grad = (2.0 / (r * r)) * (coef @ diff)
    return lp, grad


def sample_u(n, w_n_sn, rng) -> float:
    if not w_n_sn > 0:
        raise InvalidStateError(f"point {n} has non-positive weight {w_n_sn} on its own expert")
    return float(rng.uniform(0.0, w_n_sn))


def stick_loop(
    X,
    state: GatingState,
    assignments,
    rng,
    hmc_config: HmcConfig | None = None,
    h_adapters=None,
    adapt: bool = False,
    on_event=None,
):
    """Sweep sticks 1, 2, ... until the slice variables certify truncation.

    Existing sticks are reused as starting points; sticks beyond the previous
    truncation are drawn from the prior.  Returns (new_state, aux).
    ``on_event(kind, i)`` is called after each v, h and u draw.
    """
    X = np.atleast_2d(X)
    s = np.asarray(assignments, dtype=int)
    N = s.size
    D = state.h.shape[1] if state.h.ndim == 2 and state.h.shape[1] else X.shape[1]
    if N == 0:
        X = np.zeros((0, D))
    hmc_config = hmc_config or HmcConfig()
    r = state.kernel_width
    u = np.zeros(N)
    remainder = np.ones(N)
    max_s = int(s.max()) if N else -1
    vs, hs, As, Bs = [], [], [], []
    j = 0
    while True:
        if j >= MAX_TRUNCATION:
            raise RunawayTruncationError(f"truncation level exceeded {MAX_TRUNCATION}")
        if j < state.v.size:
            v_j, h_j = float(state.v[j]), state.h[j].copy()
        else:
            v_j = float(rng.beta(state.alpha, state.beta_param))
            h_j = rng.random(D)
        kap = np.exp(-np.sum((X - h_j) ** 2, axis=1) / (r * r))
        A, B = sample_aux_column(s, j, v_j, kap, rng)

        active = s >= j
        n_active = int(active.sum())
        successes = int(A[active].sum())
        v_j = float(rng.beta(state.alpha + successes, state.beta_param + n_active - successes))
        if on_event is not None:
            on_event("v", j)

        if n_active:
            X_act = X[active]
            B_act = B[active].astype(float)
            adapter = h_adapters.get(j) if h_adapters is not None else None
            res = hmc_sample_unit_box(
                lambda h: h_log_posterior_grad(h, B_act, X_act, r),
                h_j, hmc_config, rng, adapter, adapt,
            )
            if adapt and h_adapters is not None:
                h_adapters.record(res.accept_prob)
            h_j = res.value
        else:
            # no point reaches this stick, so its location is a prior draw
            h_j = rng.random(D)
        if on_event is not None:
            on_event("h", j)

        kap = np.exp(-np.sum((X - h_j) ** 2, axis=1) / (r * r))
        w_j = v_j * kap * remainder
        remainder = remainder * (1.0 - v_j * kap)
        mine = np.flatnonzero(s == j)
        for n in mine:
            u[n] = sample_u(n, w_j[n], rng)
        if on_event is not None and mine.size:
            on_event("u", j)

        vs.append(v_j)
        hs.append(h_j)
        As.append(A)
        Bs.append(B)
        j += 1
        if j > max_s and np.all(u > remainder):
            break

    new_state = GatingState(r, state.alpha, state.beta_param, np.array(vs), np.array(hs), j)
    aux = SliceAuxiliaries(u, np.stack(As, axis=1), np.stack(Bs, axis=1))
    return new_state, aux

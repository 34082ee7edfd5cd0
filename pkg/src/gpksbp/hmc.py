"""Fixed-length HMC with dual-averaging step sizes.

Positive parameters are moved in log space (the Jacobian term is added to
the log-density internally); parameters on the unit hypercube are moved with
a reflecting leapfrog.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass
class HmcConfig:
    leapfrog_steps: int = 5
    step_cap: float = 0.05
    target_accept: float = 0.8
    dual_averaging_enabled: bool = True
    adaptation_iterations: int | None = None  # None: adapt for the whole burn-in
    initial_step: float = 0.01

    def __post_init__(self):
        if int(self.leapfrog_steps) < 1:
            raise ConfigError("leapfrog_steps must be at least 1")
        if not self.step_cap > 0:
            raise ConfigError("step_cap must be positive")
        if not 0 < self.target_accept < 1:
            raise ConfigError("target_accept must lie in (0, 1)")
        if not 0 < self.initial_step:
            raise ConfigError("initial_step must be positive")
        self.leapfrog_steps = int(self.leapfrog_steps)
        if self.adaptation_iterations is not None:
            self.adaptation_iterations = int(self.adaptation_iterations)

    def adapt_until(self, burn_in: int) -> int:
        if not self.dual_averaging_enabled:
            return 0
        if self.adaptation_iterations is None:
            return burn_in
        return min(self.adaptation_iterations, burn_in)


class DualAveraging:
    """Step-size adaptation toward a target acceptance probability.

    Constants follow Hoffman & Gelman (2014): gamma=0.05, t0=10, kappa=0.75,
    mu = log(10 * initial step).  The step in use never exceeds ``cap``.
    """

    def __init__(self, initial_step=0.01, target=0.8, cap=0.05, gamma=0.05, t0=10.0, kappa=0.75):
        self.target = target
        self.cap = cap
        self.gamma = gamma
        self.t0 = t0
        self.kappa = kappa
        self.mu = math.log(10.0 * initial_step)
        self.log_step = math.log(initial_step)
        self.log_step_bar = 0.0
        self.h_bar = 0.0
        self.count = 0
        self.frozen = False

    @classmethod
    def from_config(cls, config: HmcConfig) -> "DualAveraging":
        return cls(config.initial_step, config.target_accept, config.step_cap)

    @property
    def step(self) -> float:
        # compare in log space: log_step can grow without bound while the cap binds
        if self.log_step >= math.log(self.cap):
            return self.cap
        return math.exp(self.log_step)

    def update(self, accept_prob: float) -> None:
        if self.frozen:
            return
        self.count += 1
        m = self.count
        w = 1.0 / (m + self.t0)
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept_prob)
        self.log_step = self.mu - math.sqrt(m) / self.gamma * self.h_bar
        eta = m ** (-self.kappa)
        self.log_step_bar = eta * self.log_step + (1.0 - eta) * self.log_step_bar

    def freeze(self) -> None:
        if not self.frozen and self.count > 0:
            self.log_step = self.log_step_bar
        self.frozen = True

    def clone(self) -> "DualAveraging":
        return copy.copy(self)


@dataclass
class HmcResult:
    value: np.ndarray
    accepted: bool
    accept_prob: float
    step_size: float
    failed: bool = False


_TINY = np.finfo(float).tiny


def log_transformed(log_density_and_grad):
    """Wrap a density on the positive orthant as a density over w = log(theta).

    log p_w(w) = log p(e^w) + sum(w);  grad_w = grad_theta * e^w + 1.
    """

    def wrapped(w):
        with np.errstate(over="ignore", invalid="ignore"):
            theta = np.exp(w)
            if not np.all((theta >= _TINY) & np.isfinite(theta)):
                # e^w under- or overflowed; treat as a divergent proposal
                return -np.inf, np.zeros_like(theta)
            try:
                lp, grad = log_density_and_grad(theta)
            except (ZeroDivisionError, OverflowError):
                return -np.inf, np.zeros_like(theta)
            return lp + float(np.sum(w)), np.asarray(grad) * theta + 1.0

    return wrapped


def _reflect(x, p):
    # fold positions back into [0, 1], flipping momentum at each bounce
    for _ in range(64):
        low = x < 0.0
        high = x > 1.0
        if not (low.any() or high.any()):
            return x, p
        x = np.where(low, -x, np.where(high, 2.0 - x, x))
        p = np.where(low | high, -p, p)
    return x, p


def leapfrog(x, p, log_density_and_grad, step, n_steps, reflect=False, grad=None):
    """Run ``n_steps`` leapfrog steps; returns (x, p, log_density, grad)."""
    x = np.array(x, dtype=float)
    p = np.array(p, dtype=float)
    if grad is None:
        _, grad = log_density_and_grad(x)
    lp = None
    for _ in range(n_steps):
        p = p + 0.5 * step * grad
        x = x + step * p
        if reflect:
            x, p = _reflect(x, p)
        lp, grad = log_density_and_grad(x)
        if not (np.isfinite(lp) and np.all(np.isfinite(grad))):
            return x, p, -np.inf, grad
        p = p + 0.5 * step * grad
    return x, p, lp, grad


def hmc_step(log_density_and_grad, x0, step, n_steps, rng, reflect=False, current=None):
    """One Metropolis-corrected HMC transition in the given coordinates."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if current is None:
        current = log_density_and_grad(x0)
    lp0, grad0 = current
    p0 = rng.standard_normal(x0.size)
    x1, p1, lp1, grad1 = leapfrog(x0, p0, log_density_and_grad, step, n_steps, reflect, grad0)
    if not np.isfinite(lp1):
        return x0, False, 0.0, True
    log_ratio = (lp1 - 0.5 * p1 @ p1) - (lp0 - 0.5 * p0 @ p0)
    accept_prob = 1.0 if log_ratio >= 0 else math.exp(log_ratio)
    if not np.isfinite(accept_prob):
        return x0, False, 0.0, True
    if rng.random() < accept_prob:
        return x1, True, accept_prob, False
    return x0, False, accept_prob, False


def _run(target, x0, config, rng, adapter, adapt, reflect):
    if config.leapfrog_steps < 1:
        raise ConfigError("leapfrog_steps must be at least 1")
    step = adapter.step if adapter is not None else min(config.initial_step, config.step_cap)
    current = target(x0)
    if not np.isfinite(current[0]):
        raise ValueError("HMC started from a point of zero density")
    x1, accepted, prob, failed = hmc_step(
        target, x0, step, config.leapfrog_steps, rng, reflect=reflect, current=current
    )
    if adapter is not None and adapt and config.dual_averaging_enabled:
        adapter.update(prob)
    return x1, accepted, prob, step, failed


def hmc_sample(log_density_and_grad, current_value, config: HmcConfig, rng, adapter=None, adapt=False):
    """HMC transition for a positive parameter vector.

    ``log_density_and_grad`` is expressed in the original parameterization;
    the transition runs on log(theta).
    """
    theta0 = np.atleast_1d(np.asarray(current_value, dtype=float))
    w1, accepted, prob, step, failed = _run(
        log_transformed(log_density_and_grad), np.log(theta0), config, rng, adapter, adapt, False
    )
    value = np.exp(w1) if accepted else theta0
    return HmcResult(value, accepted, prob, step, failed)


def hmc_sample_unit_box(log_density_and_grad, current_value, config: HmcConfig, rng, adapter=None, adapt=False):
    """HMC transition for a point in [0, 1]^D with reflection at the faces."""
    x0 = np.atleast_1d(np.asarray(current_value, dtype=float))
    x1, accepted, prob, step, failed = _run(log_density_and_grad, x0, config, rng, adapter, adapt, True)
    return HmcResult(x1 if accepted else x0, accepted, prob, step, failed)


class AdapterBank:
    """Per-slot step-size adapters plus a pooled template.

    New slots start from a clone of the template, which sees every
    acceptance probability recorded during adaptation.
    """

    def __init__(self, config: HmcConfig):
        self.template = DualAveraging.from_config(config)
        self.slots = {}

    def get(self, key) -> DualAveraging:
        if key not in self.slots:
            self.slots[key] = self.template.clone()
        return self.slots[key]

    def record(self, accept_prob: float) -> None:
        self.template.update(accept_prob)

    def freeze(self) -> None:
        self.template.freeze()
        for adapter in self.slots.values():
            adapter.freeze()

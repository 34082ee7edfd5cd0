"""Synthetic test functions, sampling plans and pre-processing.

Inputs are scaled to [0, 1] per dimension and responses standardized, with
both transforms fitted on the training rows only.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .streams import substream

NOISE_SD = 0.05
DEMO_BOX = (-2.0, 6.0)
DEMO_NOISE_VAR = 1e-6
DEMO_RECTANGLES = (
    ((-1.0, 0.0), (-1.0, 1.0)),
    ((0.0, 1.0), (-1.0, 1.0)),
    ((4.0, 5.0), (4.0, 5.0)),
)

# order: rw, r, Tu, Tl, Hu, Hl, L, Kw
BOREHOLE_BOUNDS = np.array([
    [0.05, 0.15],
    [100.0, 50000.0],
    [63070.0, 115600.0],
    [63.1, 116.0],
    [990.0, 1110.0],
    [700.0, 820.0],
    [1120.0, 1680.0],
    [9855.0, 12045.0],
])

NAMES = {
    1: "borehole",
    2: "dette_pepelyshev_exp",
    3: "dette_pepelyshev_8d",
    4: "franke",
    5: "gramacy_lee_6d",
}


def gl2008_demo(x1, x2):
    """x1 * exp(-(x1^2 + x2^2))."""
    return x1 * np.exp(-(x1 * x1 + x2 * x2))


def borehole(x) -> float:
    rw, r, Tu, Tl, Hu, Hl, L, Kw = x
    log_ratio = math.log(r / rw)
    denom = log_ratio * (1.0 + 2.0 * L * Tu / (log_ratio * rw * rw * Kw) + Tu / Tl)
    return 2.0 * math.pi * Tu * (Hu - Hl) / denom


def dette_pepelyshev_exp(x) -> float:
    # exp(-2 / 0^p) is 0; computed via the limit rather than a division by zero
    def term(xi, p):
        return 0.0 if xi == 0.0 else math.exp(-2.0 / xi**p)

    return 100.0 * (term(x[0], 1.75) + term(x[1], 1.5) + term(x[2], 1.25))


def dette_pepelyshev_8d(x) -> float:
    x = np.asarray(x, dtype=float)
    value = 4.0 * (x[0] - 2.0 + 8.0 * x[1] - 8.0 * x[1] ** 2) ** 2
    value += (3.0 - 4.0 * x[1]) ** 2
    value += 16.0 * math.sqrt(x[2] + 1.0) * (2.0 * x[2] - 1.0) ** 2
    partial = np.cumsum(x[2:])  # sum_{j=3}^{i} x_j for i = 3..8
    for i in range(4, 9):
        value += i * math.log1p(partial[i - 3])
    return float(value)


def franke(x) -> float:
    x1, x2 = 9.0 * x[0], 9.0 * x[1]
    return (
        0.75 * math.exp(-((x1 - 2.0) ** 2) / 4.0 - ((x2 - 2.0) ** 2) / 4.0)
        + 0.75 * math.exp(-((x1 + 1.0) ** 2) / 49.0 - ((x2 + 1.0) ** 2) / 10.0)
        + 0.5 * math.exp(-((x1 - 7.0) ** 2) / 4.0 - ((x2 - 3.0) ** 2) / 4.0)
        - 0.2 * math.exp(-((x1 - 4.0) ** 2) - (x2 - 7.0) ** 2)
    )


def gramacy_lee_6d(x) -> float:
    """Noise-free part; x5 and x6 are inactive."""
    return math.exp(math.sin((0.9 * (x[0] + 0.48)) ** 10)) + x[1] * x[2] + x[3]


_FUNCTIONS = {1: borehole, 2: dette_pepelyshev_exp, 3: dette_pepelyshev_8d, 4: franke, 5: gramacy_lee_6d}
_DIMS = {1: 8, 2: 3, 3: 8, 4: 2, 5: 6}


def domain(dataset_id: int) -> np.ndarray:
    """(D, 2) array of lower/upper bounds."""
    if dataset_id == 1:
        return BOREHOLE_BOUNDS.copy()
    if dataset_id in _DIMS:
        return np.tile([0.0, 1.0], (_DIMS[dataset_id], 1))
    raise DomainError(f"unknown dataset id {dataset_id}")


def benchmark_function(dataset_id: int, x, rng=None, noise: bool = True) -> float:
    """Evaluate test function ``dataset_id`` at a raw (un-normalized) input.

    Function 5 adds N(0, 0.05^2) noise when ``noise`` is set; ``rng`` is then
    required.
    """
    bounds = domain(dataset_id)
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != bounds.shape[0]:
        raise DomainError(f"dataset {dataset_id} takes {bounds.shape[0]} inputs, got {x.size}")
    if np.any(x < bounds[:, 0]) or np.any(x > bounds[:, 1]) or not np.all(np.isfinite(x)):
        raise DomainError(f"input {x} lies outside the domain of dataset {dataset_id}")
    value = _FUNCTIONS[dataset_id](x)
    if dataset_id == 5 and noise:
        if rng is None:
            raise ValueError("dataset 5 needs an rng for its noise term")
        value += NOISE_SD * rng.standard_normal()
    return float(value)


@dataclass
class Transform:
    x_low: np.ndarray
    x_high: np.ndarray
    y_mean: float
    y_sd: float

    @classmethod
    def fit(cls, X, y, x_low=None, x_high=None) -> "Transform":
        X = np.atleast_2d(X)
        lo = X.min(axis=0) if x_low is None else np.asarray(x_low, dtype=float)
        hi = X.max(axis=0) if x_high is None else np.asarray(x_high, dtype=float)
        sd = float(np.std(y))
        return cls(lo, hi, float(np.mean(y)), sd if sd > 0 else 1.0)

    def _span(self):
        span = self.x_high - self.x_low
        return np.where(span > 0, span, 1.0)

    def normalize(self, X):
        return (np.atleast_2d(X) - self.x_low) / self._span()

    def denormalize(self, Z):
        return np.atleast_2d(Z) * self._span() + self.x_low

    def standardize(self, y):
        return (np.asarray(y, dtype=float) - self.y_mean) / self.y_sd

    def unstandardize(self, z):
        return np.asarray(z, dtype=float) * self.y_sd + self.y_mean

    def to_dict(self) -> dict:
        return {
            "x_low": self.x_low.tolist(),
            "x_high": self.x_high.tolist(),
            "y_mean": self.y_mean,
            "y_sd": self.y_sd,
        }

    @classmethod
    def from_dict(cls, d) -> "Transform":
        return cls(np.asarray(d["x_low"], dtype=float), np.asarray(d["x_high"], dtype=float),
                   float(d["y_mean"]), float(d["y_sd"]))

    @classmethod
    def identity(cls, dim: int) -> "Transform":
        return cls(np.zeros(dim), np.ones(dim), 0.0, 1.0)


@dataclass
class Dataset:
    name: str
    X_raw: np.ndarray
    y_raw: np.ndarray
    transform: Transform
    X_test_raw: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    y_test_raw: np.ndarray = field(default_factory=lambda: np.zeros(0))
    fixed_noise: float | None = None

    @property
    def X_norm(self) -> np.ndarray:
        return self.transform.normalize(self.X_raw)

    @property
    def y_std(self) -> np.ndarray:
        return self.transform.standardize(self.y_raw)

    X_train = X_norm
    y_train = y_std

    @property
    def X_test(self) -> np.ndarray:
        return self.transform.normalize(self.X_test_raw)

    @property
    def y_test(self) -> np.ndarray:
        return self.transform.standardize(self.y_test_raw)

    @property
    def dim(self) -> int:
        return self.X_raw.shape[1]

    def to_csv(self, path) -> None:
        """Raw inputs and responses with header x1..xD, y, split."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"x{d + 1}" for d in range(self.dim)] + ["y", "split"])
            for X, y, split in ((self.X_raw, self.y_raw, "train"), (self.X_test_raw, self.y_test_raw, "test")):
                for row, value in zip(X, y):
                    writer.writerow([repr(float(v)) for v in row] + [repr(float(value)), split])


def _evaluate(dataset_id, X, rng, noise):
    return np.array([benchmark_function(dataset_id, x, rng, noise) for x in X])


def sample_design(dataset_id: int, n_train: int = 30, n_test: int = 300, seed: int = 0,
                  noise_enabled: bool = True) -> Dataset:
    """Uniform i.i.d. training and test inputs over the function's domain."""
    bounds = domain(dataset_id)
    design_rng = substream(seed, "design")
    noise_rng = substream(seed, "noise")
    lo, hi = bounds[:, 0], bounds[:, 1]
    X = lo + (hi - lo) * design_rng.random((n_train, lo.size))
    X_test = lo + (hi - lo) * design_rng.random((n_test, lo.size))
    y = _evaluate(dataset_id, X, noise_rng, noise_enabled)
    y_test = _evaluate(dataset_id, X_test, noise_rng, noise_enabled)
    return Dataset(NAMES[dataset_id], X, y, Transform.fit(X, y), X_test, y_test)


def demo_design(seed: int = 0) -> Dataset:
    """Three clusters of ten points over [-2, 6]^2 with noiseless responses.

    Inputs are scaled with the nominal box, and the expert noise variance is
    pinned at 1e-6.
    """
    rng = substream(seed, "design")
    blocks = []
    for (a1, b1), (a2, b2) in DEMO_RECTANGLES:
        u = rng.random((10, 2))
        blocks.append(np.column_stack([a1 + (b1 - a1) * u[:, 0], a2 + (b2 - a2) * u[:, 1]]))
    X = np.vstack(blocks)
    y = gl2008_demo(X[:, 0], X[:, 1])
    low, high = DEMO_BOX
    transform = Transform.fit(X, y, np.full(2, low), np.full(2, high))
    return Dataset("gl2008_demo", X, y, transform, np.zeros((0, 2)), np.zeros(0), DEMO_NOISE_VAR)


def diagonal_points(n: int = 9) -> np.ndarray:
    """Evenly spaced raw inputs on the diagonal of the demo box."""
    t = np.linspace(DEMO_BOX[0], DEMO_BOX[1], n)
    return np.column_stack([t, t])


def load_dataset(name, seed: int = 0, **kwargs) -> Dataset:
    """``name`` is 'demo' or a dataset id 1..5 (int or digit string)."""
    if str(name) == "demo":
        return demo_design(seed)
    try:
        dataset_id = int(name)
    except (TypeError, ValueError):
        raise DomainError(f"unknown dataset {name!r}") from None
    if dataset_id not in NAMES:
        raise DomainError(f"unknown dataset {name!r}")
    return sample_design(dataset_id, seed=seed, **kwargs)

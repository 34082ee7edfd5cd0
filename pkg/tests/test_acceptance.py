"""End-to-end acceptance checks, one test per criterion.

Each test prints a single PASS/FAIL line (visible with ``pytest -v``).  The
last three run real chains at full or ``--fast`` scale and take from minutes
to tens of minutes; deselect them with ``-m "not slow"``.
"""
import csv
import json
import math
import time

import numpy as np
import pytest
from scipy.special import gammaln
from scipy.stats import beta as beta_dist
from scipy.stats import geom

from gpksbp import cli
from gpksbp.datasets import demo_design
from gpksbp.diagnostics import ancestral_draw, batch_means_se, successive_conditional
from gpksbp.gibbs import ChainTrace, Expert, GpksbpSampler, run_chain, sample_assignment
from gpksbp.gp_expert import (
    ExpertHyper,
    ExpertPosteriorCache,
    build_cache,
    lml_gradient,
    log_marginal_likelihood,
    rank1_downdate,
    rank1_update,
)
from gpksbp.hmc import HmcConfig
from gpksbp.hyper_sampler import (
    Priors,
    alpha_log_c,
    beta_log_c,
    envelope_parameters,
    log_envelope,
    r_log_posterior_grad_ksbp,
    rejection_sample_alpha,
    rejection_sample_beta,
)
from gpksbp.ksbp_gating import GatingState, h_log_posterior_grad, mixture_weights, sample_u
from gpksbp.metrics import PredictiveMixture, crps
from gpksbp.rg_baseline import rg_r_log_pseudo_posterior_grad


@pytest.fixture
def report(capsys):
    def emit(label, ok, detail=""):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {label}: {detail}")
        assert ok, f"{label}: {detail}"

    return emit


def central_difference(f, x, step):
    return (f(x + step) - f(x - step)) / (2 * step)


def rel_error(fd, g):
    return abs(fd - g) / max(1.0, abs(g))


# ------------------------------------------------------------ gradients

def test_gradient_suite(report):
    rng = np.random.default_rng(100)
    start = time.perf_counter()
    worst = {}

    errs = []
    for _ in range(100):
        N, D = int(rng.integers(1, 16)), int(rng.integers(1, 6))
        X, y = rng.random((N, D)), rng.standard_normal(N)
        theta = np.r_[rng.uniform(0.3, 3.0), rng.uniform(0.2, 2.0, D), rng.uniform(0.01, 1.0)]
        g = lml_gradient(X, y, ExpertHyper(theta[0], theta[1:-1], theta[-1]))
        for k in range(theta.size):
            def f(t, k=k):
                th = theta.copy()
                th[k] = t
                return log_marginal_likelihood(X, y, ExpertHyper(th[0], th[1:-1], th[-1]))
            errs.append(rel_error(central_difference(f, theta[k], 1e-6 * theta[k]), g[k]))
    worst["lml"] = max(errs)

    errs = []
    for _ in range(100):
        n, D = int(rng.integers(1, 12)), int(rng.integers(1, 5))
        X, B = rng.random((n, D)), rng.integers(0, 2, n)
        h, r = rng.uniform(0.05, 0.95, D), rng.uniform(0.2, 1.5)
        g = h_log_posterior_grad(h, B, X, r)[1]
        for d in range(D):
            e = np.zeros(D)
            e[d] = 1e-6
            fd = (h_log_posterior_grad(h + e, B, X, r)[0] - h_log_posterior_grad(h - e, B, X, r)[0]) / 2e-6
            errs.append(rel_error(fd, g[d]))
    worst["h"] = max(errs)

    errs = []
    for _ in range(100):
        N, D, m = int(rng.integers(2, 12)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        X, H = rng.random((N, D)), rng.random((m, D))
        s = rng.integers(0, m, N)
        B = np.where(s[:, None] >= np.arange(m), rng.integers(0, 2, (N, m)), -1)
        B[np.arange(N), s] = 1
        r = rng.uniform(0.2, 1.5)
        g = r_log_posterior_grad_ksbp(r, B, H, X, s)[1]
        fd = central_difference(lambda t: r_log_posterior_grad_ksbp(t, B, H, X, s)[0], r, 1e-6 * r)
        errs.append(rel_error(fd, g))
    worst["r_ksbp"] = max(errs)

    errs = []
    for _ in range(100):
        N = int(rng.integers(3, 12))
        X, s = rng.random((N, int(rng.integers(1, 4)))), rng.integers(0, 3, N)
        r = rng.uniform(0.2, 1.5)
        g = rg_r_log_pseudo_posterior_grad(r, s, X)[1]
        fd = central_difference(lambda t: rg_r_log_pseudo_posterior_grad(t, s, X)[0], r, 1e-6 * r)
        errs.append(rel_error(fd, g))
    worst["r_rg"] = max(errs)

    seconds = time.perf_counter() - start
    ok = max(worst.values()) < 1e-4 and seconds < 60
    detail = ", ".join(f"{k} max rel err {v:.1e}" for k, v in worst.items())
    report("gradient suite", ok, f"{detail}; {seconds:.1f}s")


# ------------------------------------------------------------ rank-1 oracle

def test_rank1_oracle(report):
    rng = np.random.default_rng(200)
    upd = down = trip = 0.0
    for k in range(200):
        n = 1 + k % 29  # systems up to 30 x 30
        A = rng.standard_normal((n + 1, n + 1))
        K = A @ A.T + (n + 1) * np.eye(n + 1)
        inv_small = np.linalg.inv(K[:n, :n])
        small = ExpertPosteriorCache(list(range(n)), K[:n, :n], inv_small, np.linalg.slogdet(K[:n, :n])[1], 0)
        grown = rank1_update(small, n, K[:n, n], K[n, n])
        upd = max(upd, np.max(np.abs(grown.cov_inverse - np.linalg.inv(K))))
        j = int(rng.integers(n + 1))
        keep = [i for i in range(n + 1) if i != j]
        full = ExpertPosteriorCache(list(range(n + 1)), K, np.linalg.inv(K), np.linalg.slogdet(K)[1], 0)
        shrunk = rank1_downdate(full, j)
        down = max(down, np.max(np.abs(shrunk.cov_inverse - np.linalg.inv(K[np.ix_(keep, keep)]))))
        back = rank1_downdate(grown, n)
        trip = max(trip, np.max(np.abs(back.cov_inverse - small.cov_inverse)))
    ok = upd < 1e-8 and down < 1e-8 and trip < 1e-9
    report("rank-1 oracle", ok,
           f"update {upd:.1e}, downdate {down:.1e}, roundtrip {trip:.1e} over 200 systems")


# ------------------------------------------------------------ rejection samplers

def brute_pmf(v, fixed, p, which, k_max=20_000):
    ks = np.arange(1, k_max + 1)
    lp = geom.logpmf(ks, p)
    for vi in v:
        lp = lp + (beta_dist.logpdf(vi, ks, fixed) if which == "alpha" else beta_dist.logpdf(vi, fixed, ks))
    pmf = np.exp(lp - lp.max())
    pmf /= pmf.sum()
    assert pmf[-50:].sum() < 1e-12
    return pmf


def tv_distance(draws, pmf):
    counts = np.bincount(draws, minlength=pmf.size + 1)[1:]
    overflow = counts[pmf.size:].sum()
    return 0.5 * (np.abs(counts[: pmf.size] / draws.size - pmf).sum() + overflow / draws.size)


def test_rejection_sampler_oracle(report):
    rng = np.random.default_rng(300)
    worst_tv = 0.0
    dominated = True
    ks = np.arange(1, 10_001)
    for _ in range(10):
        v = rng.uniform(0.05, 0.95, int(rng.integers(1, 6)))
        fixed, p = int(rng.integers(1, 8)), float(rng.uniform(0.2, 0.8))
        for which, sampler, log_c in (
            ("alpha", rejection_sample_alpha, alpha_log_c(v, p)),
            ("beta", rejection_sample_beta, beta_log_c(v, p)),
        ):
            draws = sampler(fixed, v, p, rng, size=1_000_000)
            worst_tv = max(worst_tv, tv_distance(draws, brute_pmf(v, fixed, p, which)))
            _, knee, log_phi, log_peak = envelope_parameters(fixed, v.size, log_c)
            log_target = v.size * (gammaln(ks + fixed) - gammaln(ks)) + (ks - 1) * log_c
            dominated &= bool(np.all(log_envelope(ks, knee, log_phi, log_peak) >= log_target - 1e-9))
    ok = worst_tv < 0.02 and dominated
    report("rejection samplers", ok,
           f"max TV {worst_tv:.4f} at 1e6 draws (10 states x alpha/beta); dominance to 1e4 {dominated}")


# ------------------------------------------------------------ CRPS

def test_crps_oracle(report):
    from scipy import integrate

    rng = np.random.default_rng(400)
    worst = 0.0
    for _ in range(50):
        k = int(rng.integers(1, 5))
        mix = PredictiveMixture(rng.dirichlet(np.ones(k)), rng.normal(0, 2, k), rng.uniform(0.05, 3.0, k))
        y = rng.normal(0, 2.5)
        sd = np.sqrt(mix.variances)
        lo, hi = min(y, (mix.means - 12 * sd).min()), max(y, (mix.means + 12 * sd).max())
        left = integrate.quad(lambda t: mix.cdf(t) ** 2, lo, y, limit=400, epsabs=1e-13, epsrel=1e-12)[0]
        right = integrate.quad(lambda t: (1 - mix.cdf(t)) ** 2, y, hi, limit=400, epsabs=1e-13, epsrel=1e-12)[0]
        worst = max(worst, abs(crps(mix, y) - (left + right)))
    single = 0.0
    for sd in (0.1, 1.0, 3.7):
        mix = PredictiveMixture([1.0], [0.4], [sd * sd])
        single = max(single, abs(crps(mix, 0.4) - sd * (math.sqrt(2 / math.pi) - math.sqrt(1 / math.pi))))
    ok = worst < 1e-6 and single < 1e-10
    report("CRPS", ok, f"quadrature max diff {worst:.1e}, single Gaussian {single:.1e}")


# ------------------------------------------------------------ slice sampling law

def test_slice_sampling_law(report):
    # one input, three sticks; the last stick has v = 1 at the input so no mass is left over
    x = np.array([0.4, 0.6])
    h = np.array([[0.1, 0.2], [0.9, 0.5], x])
    gating = GatingState(0.8, 1, 1, [0.45, 0.5, 1.0], h, 3)
    w = mixture_weights(x, gating, 3)
    X, y = x[None, :], np.array([0.3])
    hyper = ExpertHyper(1.0, [0.5, 0.5], 0.1)
    # identical hypers and a single point: every candidate scores the same prior density
    experts = [Expert(hyper, build_cache([0], X, hyper)), Expert(hyper.copy()), Expert(hyper.copy())]
    s = np.zeros(1, int)
    rng = np.random.default_rng(500)
    n = 1_000_000
    counts = np.zeros(3)
    for _ in range(n):
        u = sample_u(0, w[s[0]], rng)
        counts[sample_assignment(0, u, w, experts, X, y, s, rng)] += 1
    tv = 0.5 * np.abs(counts / n - w).sum()
    ok = abs(w.sum() - 1) < 1e-12 and tv < 0.01
    report("slice-sampling law", ok, f"weights {np.round(w, 4).tolist()}, TV {tv:.4f} at 1e6 draws")


# ------------------------------------------------------------ Geweke

@pytest.mark.slow
def test_geweke_joint_distribution(report):
    X = np.array([[0.1], [0.4], [0.6], [0.9]])
    priors = Priors()
    n = 50_000
    rng = np.random.default_rng(600)
    anc = [ancestral_draw(X, priors, rng) for _ in range(n)]
    ancestral = {k: np.array([a[k] for a in anc], dtype=float) for k in ("r", "alpha")}
    start = anc[0]
    sampler = GpksbpSampler(X, start["y"], priors, HmcConfig(dual_averaging_enabled=False, initial_step=0.05),
                            rng=np.random.default_rng(601))
    chain = successive_conditional(sampler, n, np.random.default_rng(602), record=("r", "alpha"))
    warm = n // 10
    lines, ok = [], True
    for key in ("r", "alpha"):
        for power in (1, 2):
            a = ancestral[key] ** power
            b = chain[key][warm:] ** power
            se = math.sqrt((a.std() / math.sqrt(a.size)) ** 2 + batch_means_se(b) ** 2)
            z = (b.mean() - a.mean()) / se
            ok &= abs(z) < 3
            lines.append(f"E[{key}^{power}] {a.mean():.3f} vs {b.mean():.3f} (z={z:+.2f})")
    report("Geweke check", ok, "; ".join(lines))


# ------------------------------------------------------------ demo reproduction

@pytest.mark.slow
def test_demo_qualitative(tmp_path, report):
    out = tmp_path / "demo"
    assert cli.main(["demo", "--out", str(out)]) == 0
    with open(out / "predictive_samples.csv", newline="") as fh:
        n_samples = sum(1 for _ in csv.reader(fh)) - 1
    shared, experts = cli.read_demo_summary(out / "summary.csv")
    with open(out / "trace.jsonl") as fh:
        records = [json.loads(line) for line in fh.read().splitlines()[1:]]
    top2 = []
    for rec in records:
        counts = np.sort(np.bincount(rec["assignments"]))[::-1]
        top2.append(counts[:2].sum() / counts.sum())
    top2_share = float(np.mean(top2))

    data = demo_design(0)
    first, second = experts[:2]

    def raw_h(e):
        return data.transform.denormalize(np.array([[float(e["h1"]), float(e["h2"])]]))[0]

    steep_centre = np.array([0.0, 0.0])
    steep, flat = sorted((first, second), key=lambda e: np.linalg.norm(raw_h(e) - steep_centre))
    l_steep = np.array([float(steep["l1"]), float(steep["l2"])])
    l_flat = np.array([float(flat["l1"]), float(flat["l2"])])
    ok = (top2_share >= 0.90 and bool(np.all(l_steep < l_flat)) and n_samples == 9 * 500
          and float(shared["tau2"]) == 1e-6)
    report("demo", ok,
           f"top-2 share {top2_share:.3f}; steep l {np.round(l_steep, 3).tolist()} vs flat l "
           f"{np.round(l_flat, 3).tolist()}; {n_samples} predictive samples")


# ------------------------------------------------------------ benchmark direction

@pytest.mark.slow
def test_benchmark_direction(tmp_path, report):
    out = tmp_path / "bench"
    code = cli.main(["bench", "--fast", "--out", str(out)])
    with open(out / "aggregate.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    table = {(r["dataset"], r["model"]): r for r in rows}
    datasets = sorted({r["dataset"] for r in rows})
    crps_wins = sum(float(table[d, "gpksbp"]["crps"]) <= float(table[d, "rg"]["crps"]) for d in datasets)
    nlpd_wins = sum(float(table[d, "gpksbp"]["nlpd"]) <= float(table[d, "rg"]["nlpd"]) for d in datasets)
    per = "; ".join(
        f"{d}: crps {float(table[d, 'gpksbp']['crps']):.4f}/{float(table[d, 'rg']['crps']):.4f} "
        f"nlpd {float(table[d, 'gpksbp']['nlpd']):.4f}/{float(table[d, 'rg']['nlpd']):.4f}"
        for d in datasets
    )
    ok = code == 0 and len(datasets) == 5 and crps_wins >= 3 and nlpd_wins >= 3
    report("benchmark direction", ok,
           f"GPKSBP wins CRPS {crps_wins}/5, NLPD {nlpd_wins}/5 (gpksbp/rg) {per}")


# ------------------------------------------------------------ trace arithmetic

@pytest.mark.slow
def test_trace_arithmetic(report):
    rng = np.random.default_rng(900)
    X = rng.random((3, 1))
    y = np.array([-1.0, 0.2, 0.8])
    trace = run_chain((X, y), total_iterations=20_000, rng_seed=9, burn_in=10_000, thin=100)
    iterations = [rec.iteration for rec in trace.records]
    expected = ChainTrace.retained_iterations(20_000, 10_000, 100)
    ok = len(trace) == 100 and iterations == expected == list(range(10_100, 20_001, 100))
    report("trace arithmetic", ok, f"{len(trace)} records, iterations {iterations[0]}..{iterations[-1]}")

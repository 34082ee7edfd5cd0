import math

import numpy as np
import pytest

from gpksbp.errors import InvalidStateError
from gpksbp.gibbs import (
    ChainTrace,
    Expert,
    GpksbpSampler,
    check_partition,
    point_log_predictive,
    resample_empty_expert_hypers,
    run_chain,
    sample_assignment,
    validate_schedule,
)
from gpksbp.gp_expert import ExpertHyper, build_cache
from gpksbp.hmc import HmcConfig
from gpksbp.hyper_sampler import GeometricPriors, Priors


def toy_data(N=3, D=1, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.random((N, D))
    y = np.sin(4 * X[:, 0]) + 0.1 * rng.standard_normal(N)
    return X, (y - y.mean()) / y.std()


def test_run_chain_deterministic():
    X, y = toy_data(6, 2)
    a = run_chain((X, y), total_iterations=20, rng_seed=3, burn_in=10, thin=2)
    b = run_chain((X, y), total_iterations=20, rng_seed=3, burn_in=10, thin=2)
    assert len(a) == len(b) == 5
    for ra, rb in zip(a.records, b.records):
        assert ra.r == rb.r and ra.alpha == rb.alpha and ra.beta == rb.beta
        assert np.array_equal(ra.assignments, rb.assignments)
        assert np.array_equal(ra.v, rb.v) and np.array_equal(ra.h, rb.h)
        for ha, hb in zip(ra.hypers, rb.hypers):
            assert ha.output_scale == hb.output_scale
            assert np.array_equal(ha.length_scales, hb.length_scales)


def test_toy_chain_keeps_invariants():
    X, y = toy_data(3, 1)
    sampler = GpksbpSampler(X, y, rng=np.random.default_rng(1), burn_in=25)
    for _ in range(50):
        sampler.sweep()
        sampler.check_invariants()
        g = sampler.state.gating
        assert g.truncation_level == g.v.size == len(sampler.state.experts)
        assert np.all((g.v > 0) & (g.v < 1))
        assert g.alpha >= 1 and g.beta_param >= 1 and g.kernel_width > 0


def test_degenerate_priors_collapse_truncation():
    # huge kernel width and v close to one
    X, y = toy_data(3, 1)
    pri = Priors(kernel_width=(10_000.0, 0.01), geometric=GeometricPriors(1e-3, 0.999))
    trace = run_chain((X, y), pri, total_iterations=400, rng_seed=2, burn_in=200, thin=1)
    ones = np.mean([rec.i_star == 1 for rec in trace.records])
    assert ones >= 0.95


def test_single_candidate_leaves_state():
    X, y = toy_data(4, 1)
    h = ExpertHyper(1.0, [0.5], 0.1)
    experts = [Expert(h, build_cache([0, 1, 2, 3], X, h)), Expert(h.copy())]
    s = np.zeros(4, int)
    before = experts[0].cache.cov_inverse.copy()
    new = sample_assignment(2, 0.3, [0.6, 0.1], experts, X, y, s, np.random.default_rng(0))
    assert new == 0 and s[2] == 0
    assert np.array_equal(before, experts[0].cache.cov_inverse)


def test_no_candidate_raises():
    X, y = toy_data(2, 1)
    h = ExpertHyper(1.0, [0.5], 0.1)
    experts = [Expert(h, build_cache([0, 1], X, h))]
    with pytest.raises(InvalidStateError):
        sample_assignment(0, 0.5, [0.2], experts, X, y, np.zeros(2, int), np.random.default_rng(0))


def test_empty_destination_uses_prior_density():
    X, y = toy_data(3, 1)
    h = ExpertHyper(1.3, [0.5], 0.2)
    lp = point_log_predictive(1, Expert(h), X, y, is_member=False)
    var = 1.3 + 0.2
    assert lp == pytest.approx(-0.5 * math.log(2 * math.pi * var) - y[1] ** 2 / (2 * var), abs=1e-13)


def test_member_score_is_leave_one_out():
    X, y = toy_data(5, 2)
    h = ExpertHyper(1.1, [0.4, 0.7], 0.05)
    e = Expert(h, build_cache(range(5), X, h))
    lp_member = point_log_predictive(3, e, X, y, is_member=True)
    others = Expert(h, build_cache([0, 1, 2, 4], X, h))
    lp_other = point_log_predictive(3, others, X, y, is_member=False)
    assert lp_member == pytest.approx(lp_other, abs=1e-8)


def test_equal_likelihood_candidates_split_evenly():
    # a single point and two otherwise empty experts with identical hypers
    X = np.array([[0.3]])
    y = np.array([0.4])
    h = ExpertHyper(1.0, [0.5], 0.1)
    experts = [Expert(h, build_cache([0], X, h)), Expert(h.copy())]
    s = np.zeros(1, int)
    rng = np.random.default_rng(4)
    n = 1_000_000
    hits = 0
    for _ in range(n):
        hits += sample_assignment(0, 0.05, [0.5, 0.5], experts, X, y, s, rng) == 1
    se = math.sqrt(0.25 / n)
    assert abs(hits / n - 0.5) < 3 * se
    check_partition(experts, s, 1, X)


def test_resample_empty_hypers():
    pri = Priors()
    rng = np.random.default_rng(5)
    X, y = toy_data(2, 1)
    h = ExpertHyper(1.0, [0.5], 0.1)
    full = [Expert(h, build_cache([0, 1], X, h))]
    resample_empty_expert_hypers(full, pri, rng)
    assert full[0].hyper is h

    draws = []
    for _ in range(20_000):
        experts = [Expert(ExpertHyper(1.0, [1.0, 1.0], 1.0)) for _ in range(2)]
        resample_empty_expert_hypers(experts, pri, rng)
        for e in experts:
            assert e.hyper.output_scale > 0 and np.all(e.hyper.length_scales > 0) and e.hyper.noise_var > 0
            draws.append([e.hyper.output_scale, *e.hyper.length_scales, e.hyper.noise_var])
    draws = np.array(draws)
    means = np.array([4.0, 1.0, 1.0, 1.0])
    sds = np.sqrt(np.array([2.0 * 4.0, 2.0 * 0.25, 2.0 * 0.25, 2.0 * 0.25]))
    assert np.all(np.abs(draws.mean(axis=0) - means) < 3 * sds / math.sqrt(len(draws)))


def test_retained_record_count():
    assert len(ChainTrace.retained_iterations(20_000, 10_000, 100)) == 100
    validate_schedule(20_000, 10_000, 100)
    with pytest.raises(ValueError):
        validate_schedule(100, 100, 1)
    with pytest.raises(ValueError):
        validate_schedule(100, 10, 7)


def test_fixed_noise_is_kept():
    X, y = toy_data(6, 2)
    pri = Priors(fixed_noise=1e-6)
    trace = run_chain((X, y), pri, total_iterations=10, rng_seed=0, burn_in=5)
    for rec in trace.records:
        assert all(h.noise_var == 1e-6 for h in rec.hypers)


def test_adaptation_freezes_after_burn_in():
    X, y = toy_data(6, 1)
    sampler = GpksbpSampler(X, y, hmc_config=HmcConfig(), rng=np.random.default_rng(0), burn_in=5)
    for _ in range(6):
        sampler.sweep()
    step = sampler.r_adapter.step
    for _ in range(3):
        sampler.sweep()
    assert sampler.r_adapter.step == step

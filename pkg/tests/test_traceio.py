import json

import numpy as np
import pytest

from gpksbp.datasets import Transform
from gpksbp.errors import TraceFormatError
from gpksbp.gibbs import ChainTrace, TraceRecord, run_chain
from gpksbp.gp_expert import ExpertHyper
from gpksbp.hmc import HmcConfig
from gpksbp.hyper_sampler import Priors
from gpksbp.rg_baseline import run_rg_chain
from gpksbp.traceio import read_trace, write_trace


def small_data(seed=0):
    rng = np.random.default_rng(seed)
    X_raw = rng.uniform(-1, 3, (8, 2))
    y_raw = np.sin(X_raw[:, 0]) + X_raw[:, 1]
    t = Transform.fit(X_raw, y_raw)
    return t.normalize(X_raw), t.standardize(y_raw), t


def assert_same_records(a, b):
    assert len(a) == len(b)
    for ra, rb in zip(a.records, b.records):
        assert (ra.iteration, ra.r, ra.alpha, ra.beta, ra.i_star) == (rb.iteration, rb.r, rb.alpha, rb.beta, rb.i_star)
        assert np.array_equal(ra.assignments, rb.assignments)
        for name in ("v", "h"):
            x, y = getattr(ra, name), getattr(rb, name)
            assert (x is None and y is None) or np.array_equal(x, y)
        for ha, hb in zip(ra.hypers, rb.hypers):
            assert ha.output_scale == hb.output_scale and ha.noise_var == hb.noise_var
            assert np.array_equal(ha.length_scales, hb.length_scales)


@pytest.mark.parametrize("runner", [run_chain, run_rg_chain])
def test_round_trip(tmp_path, runner):
    X, y, t = small_data()
    trace = runner((X, y), total_iterations=12, rng_seed=4, burn_in=6, thin=3)
    path = tmp_path / "t.jsonl"
    write_trace(path, trace, X, y, t, Priors(), HmcConfig(), {"seed": 4})
    loaded = read_trace(path)
    assert loaded.trace.model == trace.model
    assert (loaded.trace.total_iterations, loaded.trace.burn_in, loaded.trace.thin) == (12, 6, 3)
    assert_same_records(loaded.trace, trace)
    assert np.array_equal(loaded.X, X) and np.array_equal(loaded.y, y)
    assert np.array_equal(loaded.transform.x_low, t.x_low) and loaded.transform.y_sd == t.y_sd
    assert loaded.priors.to_dict() == Priors().to_dict()
    assert loaded.header["extra"] == {"seed": 4}
    assert "seconds" not in loaded.header["stats"]


def test_writing_twice_is_byte_identical(tmp_path):
    X, y, t = small_data(1)
    trace = run_chain((X, y), total_iterations=6, rng_seed=0, burn_in=3)
    write_trace(tmp_path / "a.jsonl", trace, X, y, t, Priors(), HmcConfig())
    trace.stats["seconds"] = 123.0
    write_trace(tmp_path / "b.jsonl", trace, X, y, t, Priors(), HmcConfig())
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n")


def valid_file(tmp_path):
    X, y, t = small_data(2)
    rec = TraceRecord(1, 0.5, 1.0, [ExpertHyper(1.0, [0.5, 0.5], 0.1)], np.zeros(8, int),
                      alpha=1, v=np.array([0.5]), h=np.array([[0.5, 0.5]]))
    path = tmp_path / "ok.jsonl"
    write_trace(path, ChainTrace("gpksbp", 1, 0, 1, [rec, rec]), X, y, t, Priors(), HmcConfig())
    return path.read_text().splitlines()


def test_format_errors_carry_line_numbers(tmp_path):
    lines = valid_file(tmp_path)
    bad = tmp_path / "bad.jsonl"

    write_lines(bad, lines[:2] + ["{not json"])
    with pytest.raises(TraceFormatError) as err:
        read_trace(bad)
    assert err.value.line == 3

    rec = json.loads(lines[1])
    del rec["assignments"]
    write_lines(bad, lines[:2] + [json.dumps(rec)])
    with pytest.raises(TraceFormatError) as err:
        read_trace(bad)
    assert err.value.line == 3 and "assignments" in str(err.value)

    rec = json.loads(lines[1])
    rec["i_star"] = 2
    write_lines(bad, [lines[0], json.dumps(rec)])
    with pytest.raises(TraceFormatError) as err:
        read_trace(bad)
    assert err.value.line == 2


def test_header_checks(tmp_path):
    lines = valid_file(tmp_path)
    bad = tmp_path / "bad.jsonl"
    bad.write_text("")
    with pytest.raises(TraceFormatError, match="empty"):
        read_trace(bad)
    for change in ({"format": "other"}, {"version": 99}):
        header = {**json.loads(lines[0]), **change}
        write_lines(bad, [json.dumps(header)] + lines[1:])
        with pytest.raises(TraceFormatError) as err:
            read_trace(bad)
        assert err.value.line == 1
    header = json.loads(lines[0])
    del header["priors"]
    write_lines(bad, [json.dumps(header)] + lines[1:])
    with pytest.raises(TraceFormatError, match="priors"):
        read_trace(bad)


def test_blank_lines_are_skipped(tmp_path):
    lines = valid_file(tmp_path)
    path = tmp_path / "blank.jsonl"
    write_lines(path, [lines[0], "", lines[1], "   ", lines[2]])
    assert len(read_trace(path).trace) == 2

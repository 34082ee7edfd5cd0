"""Line-delimited JSON trace files.

The first line is a header naming the format and version, the model, the
iteration schedule, the priors, the HMC settings and the training data the
chain was fitted to (already transformed, plus the transform itself).  Every
following line is one retained record.
"""
from __future__ import annotations

import json
from dataclasses import asdict

import numpy as np

from .datasets import Transform
from .errors import TraceFormatError
from .gibbs import ChainTrace, TraceRecord
from .gp_expert import ExpertHyper
from .hmc import HmcConfig
from .hyper_sampler import Priors

FORMAT = "gpksbp-trace"
VERSION = 1
RECORD_FIELDS = ("iteration", "r", "alpha", "beta", "i_star", "v", "h", "hypers", "assignments")


def record_to_dict(rec: TraceRecord) -> dict:
    return {
        "iteration": rec.iteration,
        "r": rec.r,
        "alpha": rec.alpha,
        "beta": rec.beta,
        "i_star": rec.i_star,
        "v": None if rec.v is None else rec.v.tolist(),
        "h": None if rec.h is None else rec.h.tolist(),
        "hypers": [
            {"output_scale": h.output_scale, "length_scales": h.length_scales.tolist(), "noise_var": h.noise_var}
            for h in rec.hypers
        ],
        "assignments": rec.assignments.tolist(),
    }


def record_from_dict(d: dict) -> TraceRecord:
    missing = [k for k in RECORD_FIELDS if k not in d]
    if missing:
        raise ValueError(f"missing fields {missing}")
    hypers = [ExpertHyper(h["output_scale"], h["length_scales"], h["noise_var"]) for h in d["hypers"]]
    if len(hypers) != d["i_star"]:
        raise ValueError("i_star does not match the number of experts")
    rec = TraceRecord(
        iteration=int(d["iteration"]),
        r=float(d["r"]),
        beta=float(d["beta"]),
        hypers=hypers,
        assignments=np.asarray(d["assignments"], dtype=int),
        alpha=None if d["alpha"] is None else int(d["alpha"]),
        v=None if d["v"] is None else np.asarray(d["v"], dtype=float),
        h=None if d["h"] is None else np.asarray(d["h"], dtype=float).reshape(len(hypers), -1),
    )
    return rec


def write_trace(path, trace: ChainTrace, X, y, transform: Transform, priors: Priors,
                hmc_config: HmcConfig, extra: dict | None = None) -> None:
    X = np.atleast_2d(X)
    header = {
        "format": FORMAT,
        "version": VERSION,
        "model": trace.model,
        "total_iterations": trace.total_iterations,
        "burn_in": trace.burn_in,
        "thin": trace.thin,
        "records": len(trace.records),
        "priors": priors.to_dict(),
        "hmc": asdict(hmc_config),
        "data": {"X": X.tolist(), "y": np.asarray(y).tolist(), "transform": transform.to_dict()},
        "stats": {k: v for k, v in trace.stats.items() if k != "seconds"},
    }
    if extra:
        header["extra"] = extra
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for rec in trace.records:
            fh.write(json.dumps(record_to_dict(rec)) + "\n")


class LoadedTrace:
    """A trace file's records together with the data and settings in its header."""

    def __init__(self, header: dict, trace: ChainTrace):
        self.header = header
        self.trace = trace
        self.X = np.asarray(header["data"]["X"], dtype=float)
        self.y = np.asarray(header["data"]["y"], dtype=float)
        self.transform = Transform.from_dict(header["data"]["transform"])
        self.priors = Priors.from_dict(header["priors"])
        self.hmc_config = HmcConfig(**header["hmc"])


def read_trace(path) -> LoadedTrace:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise TraceFormatError("empty trace file", line=1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise TraceFormatError(f"header is not JSON ({exc.msg})", line=1) from None
    if not isinstance(header, dict) or header.get("format") != FORMAT:
        raise TraceFormatError(f"not a {FORMAT} file", line=1)
    if header.get("version") != VERSION:
        raise TraceFormatError(f"unsupported version {header.get('version')}", line=1)
    for key in ("model", "total_iterations", "burn_in", "thin", "priors", "hmc", "data"):
        if key not in header:
            raise TraceFormatError(f"header lacks {key!r}", line=1)
    trace = ChainTrace(header["model"], header["total_iterations"], header["burn_in"], header["thin"])
    trace.stats = header.get("stats", {})
    for lineno, text in enumerate(lines[1:], start=2):
        if not text.strip():
            continue
        try:
            trace.records.append(record_from_dict(json.loads(text)))
        except (json.JSONDecodeError, ValueError, KeyError, TypeError) as exc:
            raise TraceFormatError(f"bad record ({exc})", line=lineno) from None
    try:
        return LoadedTrace(header, trace)
    except (KeyError, TypeError, ValueError) as exc:
        raise TraceFormatError(f"bad header ({exc})", line=1) from None

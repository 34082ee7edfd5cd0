"""Mixture of Gaussian-process experts gated by a kernel stick-breaking process."""
from .datasets import Dataset, benchmark_function, demo_design, gl2008_demo, sample_design
from .gibbs import ChainTrace, GpksbpSampler, TraceRecord, run_chain
from .gp_expert import ExpertHyper
from .hmc import HmcConfig
from .hyper_sampler import GeometricPriors, Priors
from .metrics import PredictiveMixture, crps, nlpd, predictive_mixture, rmse, score_trace
from .rg_baseline import RgSampler, run_rg_chain

__all__ = [
    "ChainTrace", "Dataset", "ExpertHyper", "GeometricPriors", "GpksbpSampler", "HmcConfig",
    "PredictiveMixture", "Priors", "RgSampler", "TraceRecord", "benchmark_function", "crps",
    "demo_design", "gl2008_demo", "nlpd", "predictive_mixture", "rmse", "run_chain",
    "run_rg_chain", "sample_design", "score_trace",
]

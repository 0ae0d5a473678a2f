"""Adaptive importance sampling (population Monte Carlo) for Bayesian fully connected networks."""

__version__ = "0.1.0"

from .ais import SamplerConfig, run_sampler
from .data import Dataset, generate_control_dataset, load_builtin, parse_libsvm, split, standardize
from .errors import ConfigError, DataError, DegeneracyError, NumericalError, PMCNetError
from .model import BNNTarget, NetworkSpec, adam_point_estimate
from .posterior import PosteriorApproximation, build_posterior, predictive_sample

__all__ = [
    "BNNTarget", "ConfigError", "DataError", "Dataset", "DegeneracyError", "NetworkSpec", "NumericalError",
    "PMCNetError", "PosteriorApproximation", "SamplerConfig", "adam_point_estimate", "build_posterior",
    "generate_control_dataset", "load_builtin", "parse_libsvm", "predictive_sample", "run_sampler", "split",
    "standardize",
]

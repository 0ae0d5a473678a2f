"""End-to-end runs shared by the command line and the acceptance suite."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import data as data_mod
from .ais import SamplerConfig, SamplerTrace, run_sampler
from .config import RunConfig
from .errors import ConfigError
from .model import BNNTarget, NetworkSpec, adam_point_estimate
from .posterior import (MetricReport, PosteriorApproximation, PredictiveDraws, build_posterior,
                        classification_metrics, predictive_sample, regression_metrics)

log = logging.getLogger(__name__)


@dataclass
class PreparedData:
    dataset: data_mod.Dataset
    standardizer: data_mod.Standardizer | None = None
    teacher: np.ndarray | None = None


@dataclass
class TrainResult:
    spec: NetworkSpec
    init: np.ndarray
    trace: SamplerTrace
    posterior: PosteriorApproximation
    timings: dict = field(default_factory=dict)


def load_data(cfg: RunConfig) -> PreparedData:
    """Read, split and (optionally) standardise the configured data set."""
    d = cfg.data
    if d.kind == "control":
        ds, teacher = data_mod.generate_control_dataset(
            (d.control_input_dim, d.control_hidden, 1), d.control_weight_std, d.control_n_train,
            d.control_n_test, seed=d.split_seed, labels=d.control_labels)
        return PreparedData(ds, None, teacher)
    if d.kind == "builtin":
        ds = data_mod.load_builtin(d.location)
    elif d.kind == "libsvm":
        ds = data_mod.parse_libsvm(d.location, d.n_features or None)
    else:
        ds = data_mod.parse_csv_regression(d.location, d.target_column)
    ds = data_mod.split(ds, d.split_ratios, d.split_seed, stratified=d.stratified and ds.labels is not None)
    st = None
    if d.standardize:
        ds, st = data_mod.standardize(ds)
    return PreparedData(ds, st)


def network_spec(cfg: RunConfig, dataset: data_mod.Dataset, prior_variance: float | None = None) -> NetworkSpec:
    n = cfg.network
    sizes = (dataset.input_dim, *n.hidden_sizes, dataset.output_dim)
    return NetworkSpec(sizes, n.hidden_activation, dataset.likelihood, n.sigma,
                       n.prior_variance if prior_variance is None else prior_variance)


def initial_point(cfg: RunConfig, spec: NetworkSpec, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    i = cfg.init
    return adam_point_estimate(spec, X, Y, mode=i.mode, step_size=i.step_size, minibatch_size=i.minibatch_size,
                               seed=cfg.run.seed, epochs=i.epochs)


def train(cfg: RunConfig, prepared: PreparedData | None = None, sampler: SamplerConfig | None = None,
          spec: NetworkSpec | None = None, init: np.ndarray | None = None, trace_writer=None,
          callback=None) -> TrainResult:
    """Point-estimate initialisation followed by a sampler run on the train split."""
    prepared = prepared or load_data(cfg)
    ds = prepared.dataset
    spec = spec or network_spec(cfg, ds)
    X, Y = ds.subset("train")
    timings = {}
    t0 = time.perf_counter()
    if init is None:
        init = initial_point(cfg, spec, X, Y)
    timings["init_seconds"] = time.perf_counter() - t0
    sampler = sampler or cfg.sampler_config()
    if cfg.sampler.selection == "all_iterations" and not sampler.keep_all:
        sampler = SamplerConfig(**{**sampler.__dict__, "keep_all": True})
    t0 = time.perf_counter()
    trace = run_sampler(BNNTarget(spec, X, Y), sampler, init, trace_writer=trace_writer, callback=callback)
    timings["sampling_seconds"] = time.perf_counter() - t0
    post = build_posterior(trace, cfg.sampler.selection)
    return TrainResult(spec, init, trace, post, timings)


def evaluate(spec: NetworkSpec, post: PosteriorApproximation, dataset: data_mod.Dataset, split: str, R: int,
             seed: int, ci_levels=(0.95,), threshold: float = 0.5) -> tuple[MetricReport, PredictiveDraws]:
    """Algorithm-2 style evaluation: ``R`` predictive draws on ``split`` and their metric report."""
    X, Y = dataset.subset(split)
    if X.shape[1] == 0:
        raise ConfigError(f"split {split!r} is empty")
    draws = predictive_sample(post, spec, X, R, np.random.default_rng([seed, 7]))
    if dataset.task == "regression":
        return regression_metrics(draws, Y), draws
    return classification_metrics(draws, Y, threshold, roc_ci_levels=ci_levels), draws


def validation_score(report: MetricReport) -> float:
    return report.mean("mse") if report.task == "regression" else report.mean("accuracy")

"""Command line front end: ``pmcnet {train,evaluate,tune,ablate,generate-control}``.

Every command writes under ``<outdir>/<run-id>/`` and prints a short
tab-separated summary on stdout.  Library errors map to distinct exit codes
(3 configuration, 4 data, 5 numerical, 6 weight degeneracy) and a JSON error
record on stderr.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import data as data_mod
from . import pipeline, plotting
from .ais import TraceWriter
from .config import RunConfig, load
from .errors import ConfigError, PMCNetError
from .model import NetworkSpec
from .posterior import (PosteriorApproximation, golden_search_prior_variance, load_posterior,
                        prediction_histogram, save_posterior, select_iterations, write_array_csv,
                        write_report, write_roc_csv)

log = logging.getLogger("pmcnet")

VARIANT_NAMES = ("pmcnet", "gradfree", "covfree", "dmpmc", "light")


# ---------------------------------------------------------------------------
# helpers

def _apply_overrides(cfg: RunConfig, items) -> RunConfig:
    """``--set section.key=value`` overrides, parsed with the same rules as the file."""
    if not items:
        return cfg
    text = cfg.to_ini()
    from configparser import ConfigParser

    cp = ConfigParser()
    cp.optionxform = str
    cp.read_string(text)
    for item in items:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        key, value = item.split("=", 1)
        section, option = key.split(".", 1)
        if not cp.has_section(section):
            raise ConfigError(f"unknown section {section!r} in override")
        if not cp.has_option(section, option):
            raise ConfigError(f"unknown key {option!r} in [{section}]")
        cp[section][option] = value
    from io import StringIO

    from .config import from_ini_text

    buf = StringIO()
    cp.write(buf)
    return from_ini_text(buf.getvalue(), "<overrides>")


def _config(args) -> RunConfig:
    cfg = load(args.config) if args.config else RunConfig()
    cfg = _apply_overrides(cfg, args.set)
    outdir = os.environ.get("PMCNET_OUTDIR")
    if args.outdir:
        outdir = args.outdir
    if outdir:
        cfg = cfg.with_updates(run={"outdir": outdir})
    return cfg


def _run_dir(cfg: RunConfig, suffix: str = "") -> Path:
    path = cfg.output_dir()
    if suffix:
        path = path.with_name(path.name + suffix)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _dump_json(path, doc) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def _emit(rows: list[dict], stream=None) -> None:
    stream = stream or sys.stdout
    if not rows:
        return
    w = csv.DictWriter(stream, fieldnames=list(rows[0]), delimiter="\t", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})


def _metric_row(name: str, report) -> dict:
    row = {"name": name}
    for k, v in report.metrics.items():
        row[f"{k}_mean"] = v["mean"]
        row[f"{k}_std"] = v["std"]
    return row


def _write_diagnostics(path, diagnostics) -> None:
    rows = [asdict(d) for d in diagnostics]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


# ---------------------------------------------------------------------------
# commands

def cmd_train(cfg: RunConfig) -> dict:
    out = _run_dir(cfg)
    cfg.save(out / "config.ini")
    prepared = pipeline.load_data(cfg)
    spec = pipeline.network_spec(cfg, prepared.dataset)
    s = cfg.sampler
    with TraceWriter(out / "trace.bin", spec.n_params, s.M, s.K, s.T, cfg.run.seed, cfg.digest) as tw:
        res = pipeline.train(cfg, prepared, spec=spec, trace_writer=tw)
    save_posterior(out / "posterior.bin", res.posterior,
                   {"config_digest": cfg.digest, "spec": spec.to_dict(), "selection": s.selection})
    _write_diagnostics(out / "diagnostics.csv", res.trace.diagnostics)
    plotting.diagnostics_figure(out / "diagnostics.png", res.trace.diagnostics)
    data_manifest = data_mod.write_manifest(out / "data_manifest.json", prepared.dataset, prepared.standardizer)
    last = res.trace.diagnostics[-1]
    manifest = {
        "command": "train", "version": __version__, "config_digest": cfg.digest, "run_id": cfg.run_id,
        "spec": spec.to_dict(), "d_theta": spec.n_params, "J": res.posterior.size,
        "posterior_ess": res.posterior.effective_sample_size(),
        "final_iteration": asdict(last), "adaptation_events": res.trace.adaptation_events,
        "timings": res.timings, "data": data_manifest,
        "files": ["config.ini", "trace.bin", "posterior.bin", "diagnostics.csv", "diagnostics.png",
                  "data_manifest.json"],
    }
    _dump_json(out / "manifest.json", manifest)
    _emit([{"run_id": cfg.run_id, "digest": cfg.digest, "J": res.posterior.size, "d_theta": spec.n_params,
            "ess": res.posterior.effective_sample_size(), "init_s": res.timings["init_seconds"],
            "sampling_s": res.timings["sampling_seconds"], "outdir": str(out)}])
    return manifest


def _check_compatible(header: dict, cfg: RunConfig, spec: NetworkSpec) -> None:
    if header.get("config_digest") != cfg.digest:
        raise ConfigError(f"posterior was produced with configuration digest {header.get('config_digest')!r}, "
                          f"but the supplied configuration has digest {cfg.digest!r}; refusing to evaluate")
    if header.get("spec") != spec.to_dict():
        raise ConfigError("posterior network specification does not match the configured network")


def cmd_evaluate(cfg: RunConfig, posterior_path, split: str | None = None, R: int | None = None) -> dict:
    post, header = load_posterior(posterior_path)
    prepared = pipeline.load_data(cfg)
    ds = prepared.dataset
    spec = NetworkSpec.from_dict(header["spec"]) if "spec" in header else pipeline.network_spec(cfg, ds)
    _check_compatible(header, cfg, spec)
    ev = cfg.evaluation
    split = split or ev.split
    R = R or ev.R
    out = _run_dir(cfg, f"-eval-{split}")
    t0 = time.perf_counter()
    report, draws = pipeline.evaluate(spec, post, ds, split, R, cfg.run.seed, ev.ci_levels, ev.threshold)
    elapsed = time.perf_counter() - t0
    n = ds.indices(split).size
    files = ["metrics.json"]
    if report.roc is not None:
        write_roc_csv(out / "roc.csv", report.roc)
        plotting.roc_figure(out / "roc.png", report.roc, f"{split} split, R={R}")
        files += ["roc.csv", "roc.png"]
    if report.task == "binary":
        idx = [i for i in ev.histogram_samples if i < n]
        hists = {i: prediction_histogram(draws, i, ev.bins) for i in idx}
        if hists:
            cols = {"bin_lo": np.linspace(0, 1, ev.bins + 1)[:-1]}
            cols.update({f"sample_{i}": h for i, h in hists.items()})
            write_array_csv(out / "histograms.csv", cols)
            _, Y = ds.subset(split)
            plotting.histogram_figure(out / "histograms.png", hists, {i: float(Y[0, i]) for i in idx})
            files += ["histograms.csv", "histograms.png"]
    if report.squared_errors is not None:
        write_array_csv(out / "squared_errors.csv", {"sample": np.arange(n), "squared_error": report.squared_errors})
        plotting.squared_error_figure(out / "squared_errors.png", {"posterior mean": report.squared_errors})
        files += ["squared_errors.csv", "squared_errors.png"]
    doc = write_report(out / "metrics.json", report, config_digest=cfg.digest, split=split, R=R,
                       timings={"evaluation_seconds": elapsed, "seconds_per_sample": elapsed / max(n, 1)},
                       files=files)
    _emit([_metric_row(split, report)])
    return doc


def _score_runner(cfg: RunConfig, prepared, init_cache: dict, R: int):
    """Closure: (prior_variance, T) -> validation score of a full sampler run."""
    ds = prepared.dataset

    def run(prior_variance: float, T: int) -> float:
        spec = pipeline.network_spec(cfg, ds, prior_variance)
        if "init" not in init_cache:
            X, Y = ds.subset("train")
            init_cache["init"] = pipeline.initial_point(cfg, spec, X, Y)
        res = pipeline.train(cfg, prepared, sampler=cfg.sampler_config(T=T), spec=spec, init=init_cache["init"])
        report, _ = pipeline.evaluate(spec, res.posterior, ds, "validation", R, cfg.run.seed)
        score = pipeline.validation_score(report)
        log.info("prior variance %.4g, T=%d: validation score %.4f", prior_variance, T, score)
        return score

    return run


def cmd_tune(cfg: RunConfig) -> RunConfig:
    prepared = pipeline.load_data(cfg)
    ds = prepared.dataset
    if ds.indices("validation").size == 0:
        raise ConfigError("tuning needs a non-empty validation split")
    tu = cfg.tuning
    maximize = ds.task != "regression"
    run = _score_runner(cfg, prepared, {}, tu.R)
    T_search = max(tu.t_candidates)
    variance, search = golden_search_prior_variance(lambda v: run(v, T_search), tu.log10_prior_variance,
                                                    tu.golden_iterations, maximize)
    T_best, scores = select_iterations(tu.t_candidates, lambda T: run(variance, T), tu.tolerance, maximize)
    tuned = cfg.with_updates(network={"prior_variance": float(variance)}, sampler={"T": int(T_best)})
    out = _run_dir(cfg, "-tune")
    tuned.save(out / "tuned.ini")
    write_array_csv(out / "golden_search.csv", {"log10_prior_variance": np.array([e[0] for e in search.evaluations]),
                                                "validation_score": np.array([e[1] for e in search.evaluations])})
    write_array_csv(out / "iterations.csv", {"T": np.array(list(scores)), "validation_score": np.array(list(scores.values()))})
    _dump_json(out / "tuning.json", {"config_digest": cfg.digest, "tuned_digest": tuned.digest,
                                     "prior_variance": variance, "T": T_best, "bracket": search.bracket,
                                     "T_scores": scores, "maximize": maximize})
    _emit([{"prior_variance": float(variance), "T": T_best, "tuned_config": str(out / "tuned.ini")}])
    return tuned


def run_ablation(cfg: RunConfig, variants, R: int, prepared=None, init=None):
    """Run each variant on shared data and initialisation; per-iteration test metrics via callbacks."""
    from .posterior import build_posterior

    prepared = prepared or pipeline.load_data(cfg)
    ds = prepared.dataset
    spec = pipeline.network_spec(cfg, ds)
    if init is None:
        X, Y = ds.subset("train")
        init = pipeline.initial_point(cfg, spec, X, Y)
    split = "test" if ds.indices("test").size else "validation"
    rows, curves, traces = [], {}, {}
    for name in variants:
        curve = {"iteration": [], "accuracy": [], "auc": [], "mse": []}

        def watch(ss, pop, curve=curve):
            post = build_posterior([ss])
            rep, _ = pipeline.evaluate(spec, post, ds, split, R, cfg.run.seed)
            curve["iteration"].append(ss.iteration)
            for k in ("accuracy", "auc", "mse"):
                curve[k].append(rep.metrics[k]["mean"] if k in rep.metrics else np.nan)

        try:
            res = pipeline.train(cfg, prepared, sampler=cfg.sampler_config(variant=name), spec=spec, init=init,
                                 callback=watch)
        except PMCNetError as exc:
            raise type(exc)(f"variant {name}: {exc}") from exc
        report, _ = pipeline.evaluate(spec, res.posterior, ds, split, R, cfg.run.seed, cfg.evaluation.ci_levels,
                                      cfg.evaluation.threshold)
        row = _metric_row(name, report)
        row["adaptation_events"] = res.trace.adaptation_events
        rows.append(row)
        curves[name] = {k: np.asarray(v) for k, v in curve.items()}
        traces[name] = res
    return rows, curves, traces


def cmd_ablate(cfg: RunConfig, variants) -> list[dict]:
    if not variants:
        raise ConfigError("at least one variant is required")
    for v in variants:
        if v not in VARIANT_NAMES:
            raise ConfigError(f"unknown variant {v!r}; choose from {VARIANT_NAMES}")
    rows, curves, _ = run_ablation(cfg, variants, cfg.evaluation.R)
    out = _run_dir(cfg, "-ablate")
    keys = list(dict.fromkeys(k for r in rows for k in r))
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, restval="")
        w.writeheader()
        w.writerows(rows)
    with open(out / "iteration_curves.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "iteration", "accuracy", "auc", "mse"])
        for name, c in curves.items():
            for i in range(len(c["iteration"])):
                w.writerow([name, int(c["iteration"][i])] + [f"{c[k][i]:.10g}" for k in ("accuracy", "auc", "mse")])
    metrics = ("mse",) if "mse_mean" in rows[0] else ("auc", "accuracy")
    plotting.iteration_curves_figure(out / "iteration_curves.png", curves, metrics)
    _emit(rows)
    return rows


def cmd_generate_control(cfg: RunConfig) -> dict:
    d = cfg.data
    ctrl_cfg = cfg.with_updates(data={"source": "control"}, network={"hidden_sizes": (d.control_hidden,)},
                                run={"run_id": f"control-{d.split_seed}"})
    prepared = pipeline.load_data(ctrl_cfg)
    ds, teacher = prepared.dataset, prepared.teacher
    out = _run_dir(ctrl_cfg)
    for split in ("train", "test"):
        X, Y = ds.subset(split)
        with open(out / f"{split}.libsvm", "w") as fh:
            for n in range(X.shape[1]):
                feats = " ".join(f"{j + 1}:{X[j, n]:.17g}" for j in range(X.shape[0]))
                fh.write(f"{int(Y[0, n])} {feats}\n")
    spec = pipeline.network_spec(ctrl_cfg, ds)
    save_posterior(out / "teacher_posterior.bin", PosteriorApproximation.point_mass(teacher),
                   {"config_digest": ctrl_cfg.digest, "spec": spec.to_dict(), "selection": "teacher"})
    ctrl_cfg.save(out / "config.ini")
    manifest = data_mod.write_manifest(out / "data_manifest.json", ds, teacher=teacher.tolist(),
                                       config_digest=ctrl_cfg.digest)
    _emit([{"n_train": int(ds.indices("train").size), "n_test": int(ds.indices("test").size),
            "positives_train": int(ds.class_counts("train")[1]), "d_theta": spec.n_params, "outdir": str(out)}])
    return manifest


# ---------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pmcnet", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="run configuration file (INI)")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config entry")
    common.add_argument("-o", "--outdir", help="output root (default from config, or $PMCNET_OUTDIR)")
    common.add_argument("--threads", type=int, default=None, help="cap BLAS/worker threads")
    common.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="initialise, run the sampler, write trace and posterior")
    p = sub.add_parser("evaluate", parents=[common], help="predictive metrics of a posterior file")
    p.add_argument("posterior", help="posterior file written by train")
    p.add_argument("--split", choices=("train", "validation", "test"))
    p.add_argument("--R", type=int, help="number of predictive draws")
    sub.add_parser("tune", parents=[common], help="golden search of the prior variance, then choose T")
    p = sub.add_parser("ablate", parents=[common], help="compare sampler variants on shared data")
    p.add_argument("--variants", default=",".join(VARIANT_NAMES), help="comma-separated subset of %(default)s")
    sub.add_parser("generate-control", parents=[common], help="write the synthetic teacher-network data set")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    limiter = contextlib.nullcontext()
    if args.threads is not None:
        if args.threads < 1:
            print(json.dumps({"error": "ConfigError", "message": "--threads must be positive", "exit_code": 3}),
                  file=sys.stderr)
            return 3
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(args.threads)
    try:
        with limiter:
            cfg = _config(args)
            if args.command == "train":
                cmd_train(cfg)
            elif args.command == "evaluate":
                cmd_evaluate(cfg, args.posterior, args.split, args.R)
            elif args.command == "tune":
                cmd_tune(cfg)
            elif args.command == "ablate":
                cmd_ablate(cfg, [v.strip() for v in args.variants.split(",") if v.strip()])
            else:
                cmd_generate_control(cfg)
    except PMCNetError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": exc.exit_code}),
              file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())

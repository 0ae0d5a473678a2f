"""Particle posterior, predictive sampling and uncertainty-aware evaluation metrics."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError, DataError, DegeneracyError
from .model import NetworkSpec, predict

log = logging.getLogger(__name__)

N_THRESHOLDS = 1001
FPR_GRID = np.linspace(0.0, 1.0, N_THRESHOLDS)
GOLDEN = (1.0 + math.sqrt(5.0)) / 2.0


# ---------------------------------------------------------------------------
# particle approximation

@dataclass(frozen=True)
class PosteriorApproximation:
    """Weighted particles ``theta_j`` (J, d) with normalised weights summing to one."""

    particles: np.ndarray
    norm_weights: np.ndarray

    def __post_init__(self):
        if self.particles.ndim != 2 or len(self.particles) < 1:
            raise ConfigError("posterior needs at least one particle")
        if self.norm_weights.shape != (len(self.particles),):
            raise ConfigError("one weight per particle required")
        if np.any(self.norm_weights < 0) or abs(self.norm_weights.sum() - 1.0) > 1e-12:
            raise ConfigError("posterior weights must be non-negative and sum to one")

    @property
    def size(self) -> int:
        return len(self.particles)

    @property
    def dim(self) -> int:
        return self.particles.shape[1]

    @classmethod
    def point_mass(cls, theta: np.ndarray) -> "PosteriorApproximation":
        return cls(np.asarray(theta, dtype=float)[None, :].copy(), np.ones(1))

    @classmethod
    def from_log_weights(cls, particles: np.ndarray, log_weights: np.ndarray) -> "PosteriorApproximation":
        log_weights = np.where(np.isnan(log_weights), -np.inf, log_weights)
        total = logsumexp(log_weights)
        if not np.isfinite(total):
            raise DegeneracyError("all particle weights are zero")
        w = np.exp(log_weights - total)
        return cls(particles, w / w.sum())

    def mean(self) -> np.ndarray:
        return self.norm_weights @ self.particles

    def effective_sample_size(self) -> float:
        return float(1.0 / np.sum(self.norm_weights ** 2))


def build_posterior(trace, selection: str = "last_iteration") -> PosteriorApproximation:
    """Particle approximation from a sampler trace (or a list of weighted sample sets).

    ``last_iteration`` keeps the ``M K`` samples of the final iteration;
    ``all_iterations`` pools every retained iteration.  Weights are
    renormalised jointly in the log domain.
    """
    sets = list(getattr(trace, "sample_sets", trace))
    if not sets:
        raise ConfigError("cannot build a posterior from an empty trace")
    if selection == "last_iteration":
        sets = sets[-1:]
    elif selection != "all_iterations":
        raise ConfigError(f"unknown selection {selection!r}")
    d = sets[0].samples.shape[-1]
    particles = np.concatenate([s.samples.reshape(-1, d) for s in sets])
    logw = np.concatenate([s.log_weights.ravel() for s in sets])
    return PosteriorApproximation.from_log_weights(particles, logw)


# ---------------------------------------------------------------------------
# predictive sampling

@dataclass(frozen=True)
class PredictiveDraws:
    """``outputs`` (R, N, d_y): network outputs for each drawn particle."""

    outputs: np.ndarray
    sampled_indices: np.ndarray

    @property
    def n_draws(self) -> int:
        return self.outputs.shape[0]

    def mean_prediction(self) -> np.ndarray:
        return self.outputs.mean(axis=0)


def predictive_sample(post: PosteriorApproximation, spec: NetworkSpec, X: np.ndarray, R: int,
                      rng: np.random.Generator) -> PredictiveDraws:
    """Draw ``R`` particles by weight and evaluate ``Phi(theta, x)`` on every column of ``X``."""
    if R < 1:
        raise ConfigError("R must be at least 1")
    if post.dim != spec.n_params:
        raise DataError(f"posterior dimension {post.dim} does not match network ({spec.n_params})")
    idx = rng.choice(post.size, size=R, p=post.norm_weights)
    uniq, inverse = np.unique(idx, return_inverse=True)
    out = predict(spec, post.particles[uniq], X)          # (U, d_y, N)
    outputs = np.transpose(out, (0, 2, 1))[inverse]
    return PredictiveDraws(outputs, idx)


# ---------------------------------------------------------------------------
# metrics

@dataclass
class MetricReport:
    """Per-metric mean/std over predictive draws plus the mean confusion matrix and curves."""

    task: str
    n_draws: int
    metrics: dict[str, dict[str, float]] = field(default_factory=dict)
    confusion: np.ndarray | None = None
    flags: list[str] = field(default_factory=list)
    roc: "RocResult | None" = None
    squared_errors: np.ndarray | None = None

    def mean(self, name: str) -> float:
        return self.metrics[name]["mean"]

    def std(self, name: str) -> float:
        return self.metrics[name]["std"]

    def to_dict(self) -> dict:
        out = {"task": self.task, "n_draws": self.n_draws, "flags": list(self.flags),
               "metrics": {k: {kk: _json_float(vv) for kk, vv in v.items()} for k, v in self.metrics.items()}}
        if self.confusion is not None:
            out["confusion_mean"] = self.confusion.tolist()
            out["confusion_display"] = np.rint(self.confusion).astype(int).tolist()
        if self.roc is not None:
            out["auc"] = {"mean": self.roc.auc_mean, "std": self.roc.auc_std}
        return out


def _json_float(x):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else x


def _summarize(values: np.ndarray, name: str, flags: list[str]) -> dict[str, float]:
    values = np.asarray(values, dtype=float)
    defined = values[~np.isnan(values)]
    undefined = len(values) - len(defined)
    if undefined:
        flags.append(f"{name}: undefined in {undefined} of {len(values)} draws")
    if not len(defined):
        return {"mean": math.nan, "std": math.nan, "undefined_draws": undefined}
    std = 0.0 if np.ptp(defined) == 0 else float(defined.std())
    return {"mean": float(defined.mean()), "std": std, "undefined_draws": undefined}


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    out = np.full(np.broadcast(num, den).shape, math.nan)
    np.divide(num, den, out=out, where=den > 0)
    return out


def _labels_from_targets(Y: np.ndarray) -> np.ndarray:
    Y = np.asarray(Y)
    if Y.ndim == 2 and Y.shape[0] == 1:
        return Y[0].astype(int)
    if Y.ndim == 2:
        return np.argmax(Y, axis=0)
    return Y.astype(int)


def confusion_matrices(pred: np.ndarray, truth: np.ndarray, n_classes: int) -> np.ndarray:
    """(R, C, C) counts; rows are the true class, columns the predicted class."""
    R = pred.shape[0]
    flat = truth[None, :] * n_classes + pred
    offsets = np.arange(R)[:, None] * n_classes * n_classes
    counts = np.bincount((flat + offsets).ravel(), minlength=R * n_classes * n_classes)
    return counts.reshape(R, n_classes, n_classes).astype(float)


def classification_metrics(draws: PredictiveDraws, Y_test: np.ndarray, threshold: float = 0.5,
                           roc_ci_levels: Sequence[float] | None = None) -> MetricReport:
    """Accuracy, precision, recall, specificity and F1 per draw; mean and std over draws.

    Binary outputs predict the positive class when the score exceeds
    ``threshold``; multiclass outputs predict the argmax and the rates are
    macro-averaged over classes (one-versus-all).
    """
    truth = _labels_from_targets(Y_test)
    scores = draws.outputs
    R, N, dy = scores.shape
    if N != len(truth):
        raise DataError(f"{N} predictions for {len(truth)} targets")
    flags: list[str] = []
    if dy == 1:
        task, C = "binary", 2
        pred = (scores[:, :, 0] > threshold).astype(int)
    else:
        task, C = "multiclass", dy
        pred = np.argmax(scores, axis=2)
    cm = confusion_matrices(pred, truth, C)
    tp = np.diagonal(cm, axis1=1, axis2=2)             # (R, C)
    fp = cm.sum(axis=1) - tp
    fn = cm.sum(axis=2) - tp
    tn = N - tp - fp - fn
    acc = tp.sum(axis=1) / N
    if task == "binary":
        tp, fp, fn, tn = tp[:, 1], fp[:, 1], fn[:, 1], tn[:, 1]
        precision = _ratio(tp, tp + fp)
        recall = _ratio(tp, tp + fn)
        specificity = _ratio(tn, tn + fp)
        f1 = _ratio(2 * tp, 2 * tp + fp + fn)
    else:
        with np.errstate(all="ignore"):
            precision = _macro(_ratio(tp, tp + fp))
            recall = _macro(_ratio(tp, tp + fn))
            specificity = _macro(_ratio(tn, tn + fp))
            f1 = _macro(_ratio(2 * tp, 2 * tp + fp + fn))
    if task == "binary" and (np.all(truth == 0) or np.all(truth == 1)):
        flags.append("only one class present in the ground truth")
    report = MetricReport(task, R, confusion=cm.mean(axis=0), flags=flags)
    for name, vals in (("accuracy", acc), ("precision", precision), ("recall", recall),
                       ("specificity", specificity), ("f1", f1)):
        report.metrics[name] = _summarize(vals, name, flags)
    if R == 1:
        flags.append("single draw: standard deviations are 0 by construction")
    if roc_ci_levels is not None:
        try:
            report.roc = roc_with_envelopes(draws, Y_test, roc_ci_levels)
            report.metrics["auc"] = {"mean": report.roc.auc_mean, "std": report.roc.auc_std, "undefined_draws": 0}
        except DataError as exc:
            flags.append(f"auc: {exc}")
    return report


def _macro(per_class: np.ndarray) -> np.ndarray:
    out = np.full(per_class.shape[0], math.nan)
    ok = ~np.all(np.isnan(per_class), axis=1)
    out[ok] = np.nanmean(per_class[ok], axis=1)
    return out


@dataclass
class RocResult:
    """ROC curves on a common false-positive-rate grid.

    ``tpr`` holds one row per draw (macro-averaged over classes in the
    one-versus-all case) for plotting and envelopes; ``envelopes`` maps a
    credible level to the pointwise lower/upper TPR quantiles across draws.
    ``auc`` is the exact trapezoidal area under each draw's threshold chain.
    """

    fpr: np.ndarray
    tpr: np.ndarray
    auc: np.ndarray
    envelopes: dict[float, tuple[np.ndarray, np.ndarray]]
    per_class_auc: np.ndarray | None = None
    knots: list = field(default_factory=list, repr=False)

    @property
    def mean_tpr(self) -> np.ndarray:
        return self.tpr.mean(axis=0)

    @property
    def auc_mean(self) -> float:
        return float(self.auc.mean())

    @property
    def auc_std(self) -> float:
        return 0.0 if np.ptp(self.auc) == 0 else float(self.auc.std())

    def mean_curve_auc(self) -> float:
        """Area under the pointwise mean curve (exact, from the per-class knots)."""
        if not self.knots:
            return float(np.trapezoid(self.mean_tpr, self.fpr))
        return float(np.mean([_knot_area(x, lo.mean(axis=0), hi.mean(axis=0)) for x, lo, hi in self.knots]))


def roc_points(scores: np.ndarray, positive: np.ndarray, thresholds: np.ndarray | None = None
               ) -> tuple[np.ndarray, np.ndarray]:
    """(FPR, TPR) for each threshold, predicting positive when ``score >= threshold``.

    ``scores`` may be (N,) or (R, N); the threshold axis is last.
    """
    if thresholds is None:
        thresholds = np.linspace(0.0, 1.0, N_THRESHOLDS)
    positive = np.asarray(positive, dtype=bool)
    n_pos, n_neg = positive.sum(), (~positive).sum()
    if n_pos == 0 or n_neg == 0:
        raise DataError("ROC needs both classes in the ground truth")
    scores = np.atleast_2d(scores)
    # count scores >= tau by sorting each row once
    pos_sorted = np.sort(scores[:, positive], axis=1)
    neg_sorted = np.sort(scores[:, ~positive], axis=1)
    tp = n_pos - np.stack([np.searchsorted(r, thresholds, side="left") for r in pos_sorted])
    fp = n_neg - np.stack([np.searchsorted(r, thresholds, side="left") for r in neg_sorted])
    return fp / n_neg, tp / n_pos


def _tpr_on_grid(fpr: np.ndarray, tpr: np.ndarray, grid: np.ndarray = FPR_GRID) -> np.ndarray:
    """Interpolate one ROC chain onto ``grid``; at a vertical segment the upper TPR is taken."""
    f = np.concatenate(([0.0, 1.0], fpr))
    t = np.concatenate(([0.0, 1.0], tpr))
    order = np.lexsort((t, f))
    f, t = f[order], t[order]
    t = np.maximum.accumulate(t)
    hi = np.searchsorted(f, grid, side="right")       # first point strictly right of g
    last = hi - 1                                     # last point with f <= g (upper TPR there)
    out = t[last].copy()
    inner = (hi < len(f)) & (f[last] < grid)
    j = hi[inner]
    i = last[inner]
    frac = (grid[inner] - f[i]) / (f[j] - f[i])
    # the segment into the next FPR value starts at the lowest TPR of that group
    first_of_group = np.searchsorted(f, f[j], side="left")
    out[inner] = t[i] + frac * (t[first_of_group] - t[i])
    return out


def _chain_knots(fpr: np.ndarray, tpr: np.ndarray, n_neg: int) -> tuple[np.ndarray, np.ndarray]:
    """Lowest and highest TPR of a ROC chain at every FPR value ``k / n_neg``.

    FPR only takes these values, so the chain is linear between consecutive
    knots and its area follows exactly from ``(low, high)``.
    """
    f = np.concatenate(([0.0, 1.0], fpr))
    t = np.concatenate(([0.0, 1.0], tpr))
    k = np.rint(f * n_neg).astype(int)
    low = np.full(n_neg + 1, np.inf)
    high = np.full(n_neg + 1, -np.inf)
    np.minimum.at(low, k, t)
    np.maximum.at(high, k, t)
    seen = np.isfinite(low)
    if not seen.all():
        # tied negatives skip FPR values; the chain is a straight segment across them
        x = np.flatnonzero(seen)
        missing = np.flatnonzero(~seen)
        nxt = x[np.searchsorted(x, missing)]
        prv = x[np.searchsorted(x, missing) - 1]
        frac = (missing - prv) / (nxt - prv)
        low[missing] = high[missing] = high[prv] + frac * (low[nxt] - high[prv])
    return low, high


def _knot_area(x: np.ndarray, low: np.ndarray, high: np.ndarray) -> float:
    return float(np.sum(0.5 * (high[:-1] + low[1:]) * np.diff(x)))


def roc_with_envelopes(draws: PredictiveDraws, Y_test: np.ndarray, ci_levels: Sequence[float] = (0.95,),
                       thresholds: np.ndarray | None = None) -> RocResult:
    """Per-draw ROC curves, their mean, pointwise credible envelopes and trapezoidal AUCs.

    Each draw's curve is evaluated at 1001 evenly spaced thresholds; its AUC
    is the trapezoidal area under that chain of points, and the curve is
    resampled onto a common FPR grid for averaging and envelopes.
    Multiclass outputs use one-versus-all curves averaged over classes.
    """
    for a in ci_levels:
        if not 0 < a < 1:
            raise ConfigError(f"credible level {a} outside (0, 1)")
    truth = _labels_from_targets(Y_test)
    R, N, dy = draws.outputs.shape
    if dy == 1:
        classes = [(draws.outputs[:, :, 0], truth == 1)]
    else:
        classes = [(draws.outputs[:, :, c], truth == c) for c in range(dy)]
        present = [c for c in range(dy) if 0 < np.sum(truth == c) < N]
        if not present:
            raise DataError("ROC needs at least two classes in the ground truth")
        classes = [classes[c] for c in present]
    per_class, knots, auc_pc = [], [], []
    for scores, pos in classes:
        fpr, tpr = roc_points(scores, pos, thresholds)
        per_class.append(np.stack([_tpr_on_grid(fpr[r], tpr[r]) for r in range(R)]))
        n_neg = int(np.sum(~pos))
        lo, hi = zip(*(_chain_knots(fpr[r], tpr[r], n_neg) for r in range(R)))
        x = np.arange(n_neg + 1) / n_neg
        lo, hi = np.stack(lo), np.stack(hi)
        knots.append((x, lo, hi))
        auc_pc.append([_knot_area(x, lo[r], hi[r]) for r in range(R)])
    grid_tpr = np.mean(per_class, axis=0)
    auc_pc = np.array(auc_pc)                           # (C, R)
    auc = auc_pc.mean(axis=0)
    envelopes = {}
    for a in ci_levels:
        lo = np.quantile(grid_tpr, (1 - a) / 2, axis=0)
        hi = np.quantile(grid_tpr, (1 + a) / 2, axis=0)
        envelopes[float(a)] = (lo, hi)
    return RocResult(FPR_GRID.copy(), grid_tpr, auc, envelopes, auc_pc.mean(axis=1) if dy > 1 else None, knots)


def regression_metrics(draws: PredictiveDraws, Y_test: np.ndarray) -> MetricReport:
    """Per-draw MSE (averaged over samples and output dimensions); squared errors of the predictive mean."""
    Y = np.asarray(Y_test, dtype=float).T              # (N, d_y)
    if draws.outputs.shape[1:] != Y.shape:
        raise DataError(f"prediction shape {draws.outputs.shape[1:]} does not match targets {Y.shape}")
    mse = np.mean((draws.outputs - Y[None]) ** 2, axis=(1, 2))
    flags: list[str] = []
    report = MetricReport("regression", draws.n_draws, flags=flags)
    report.metrics["mse"] = _summarize(mse, "mse", flags)
    report.squared_errors = np.mean((draws.mean_prediction() - Y) ** 2, axis=1)
    if draws.n_draws == 1:
        flags.append("single draw: standard deviations are 0 by construction")
    return report


def prediction_histogram(draws: PredictiveDraws, sample_index: int, bins: int = 10) -> np.ndarray:
    """Counts of the R binary-output draws for one test sample over ``[0, 1]``."""
    if draws.outputs.shape[2] != 1:
        raise DataError("histograms are defined for a single binary output")
    counts, _ = np.histogram(draws.outputs[:, sample_index, 0], bins=bins, range=(0.0, 1.0))
    return counts


# ---------------------------------------------------------------------------
# tuning

@dataclass
class GoldenSearchResult:
    best: float
    bracket: tuple[float, float]
    evaluations: list[tuple[float, float]]
    iterations: int


def golden_section_search(objective: Callable[[float], float], lower: float, upper: float,
                          iterations: int, maximize: bool = True) -> GoldenSearchResult:
    """Golden-section search for an optimum of a unimodal function on ``[lower, upper]``.

    Each iteration shrinks the bracket by ``1/phi``; a tie between the two
    interior points shrinks it to the interior pair.  The midpoint of the
    final bracket is returned.
    """
    if not (np.isfinite(lower) and np.isfinite(upper)) or upper <= lower:
        raise ConfigError(f"degenerate search interval [{lower}, {upper}]")
    if iterations < 0:
        raise ConfigError("iterations must be non-negative")
    sign = 1.0 if maximize else -1.0
    evaluations = []

    def f(x):
        value = float(objective(x))
        evaluations.append((x, value))
        return sign * value

    a, b = float(lower), float(upper)
    c = d = fc = fd = None
    for _ in range(iterations):
        # the surviving interior point is carried over, so only new points are evaluated
        if c is None:
            c = b - (b - a) / GOLDEN
            fc = f(c)
        if d is None:
            d = a + (b - a) / GOLDEN
            fd = f(d)
        if fc > fd:
            b, d, fd, c = d, c, fc, None
        elif fc < fd:
            a, c, fc, d = c, d, fd, None
        else:
            a, b, c, d = c, d, None, None
    return GoldenSearchResult(0.5 * (a + b), (a, b), evaluations, iterations)


def golden_search_prior_variance(evaluate: Callable[[float], float], log10_interval=(-2.0, 2.0),
                                 iterations: int = 6, maximize: bool = True) -> tuple[float, GoldenSearchResult]:
    """Golden search over ``log10(prior_variance)``.

    ``evaluate(variance)`` returns the validation score of a full sampler
    run at that prior variance (mean accuracy over R draws, or MSE with
    ``maximize=False``).  Returns the selected variance and the search record.
    """
    res = golden_section_search(lambda x: evaluate(10.0 ** x), log10_interval[0], log10_interval[1],
                                iterations, maximize)
    return 10.0 ** res.best, res


def select_iterations(candidates: Sequence[int], score: Callable[[int], float], tolerance: float = 0.005,
                      maximize: bool = True) -> tuple[int, dict[int, float]]:
    """Smallest iteration count whose score is within ``tolerance`` (absolute) of the best candidate."""
    candidates = sorted(set(int(c) for c in candidates))
    if not candidates:
        raise ConfigError("no iteration candidates given")
    if candidates[0] < 1:
        raise ConfigError("iteration candidates must be positive")
    scores = {T: float(score(T)) for T in candidates}
    best = max(scores.values()) if maximize else min(scores.values())
    for T in candidates:
        gap = best - scores[T] if maximize else scores[T] - best
        if gap <= tolerance:
            return T, scores
    raise AssertionError("unreachable")


# ---------------------------------------------------------------------------
# serialisation

def write_report(path, report: MetricReport, **extra) -> dict:
    doc = {**report.to_dict(), **extra}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return doc


def write_roc_csv(path, roc: RocResult) -> None:
    levels = sorted(roc.envelopes)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["fpr", "mean_tpr"]
        for a in levels:
            header += [f"lo_tpr_{a:g}", f"hi_tpr_{a:g}"]
        w.writerow(header)
        mean = roc.mean_tpr
        for i, f in enumerate(roc.fpr):
            row = [f"{f:.6g}", f"{mean[i]:.10g}"]
            for a in levels:
                lo, hi = roc.envelopes[a]
                row += [f"{lo[i]:.10g}", f"{hi[i]:.10g}"]
            w.writerow(row)


def write_array_csv(path, columns: dict[str, np.ndarray]) -> None:
    names = list(columns)
    arrays = [np.asarray(columns[n]) for n in names]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for row in zip(*arrays):
            w.writerow([f"{v:.10g}" if isinstance(v, (float, np.floating)) else v for v in row])


POSTERIOR_MAGIC = b"PMCNETPO"
POSTERIOR_VERSION = 1


def save_posterior(path, post: PosteriorApproximation, metadata: dict) -> None:
    """Binary posterior file: magic, uint32 version, uint32 header length, JSON header, weights, particles.

    The header is serialised with sorted keys and the arrays as
    little-endian float64, so identical inputs give byte-identical files.
    """
    import struct

    header = {**metadata, "J": post.size, "d_theta": post.dim}
    body = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(POSTERIOR_MAGIC + struct.pack("<II", POSTERIOR_VERSION, len(body)) + body)
        fh.write(np.ascontiguousarray(post.norm_weights, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(post.particles, dtype="<f8").tobytes())


def load_posterior(path) -> tuple[PosteriorApproximation, dict]:
    import struct

    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != POSTERIOR_MAGIC:
        raise DataError(f"{path}: not a posterior file")
    version, n = struct.unpack("<II", raw[8:16])
    if version != POSTERIOR_VERSION:
        raise DataError(f"{path}: unsupported posterior version {version}")
    header = json.loads(raw[16:16 + n])
    J, d = header["J"], header["d_theta"]
    arr = np.frombuffer(raw[16 + n:], dtype="<f8")
    if arr.size != J * (d + 1):
        raise DataError(f"{path}: expected {J * (d + 1)} values, found {arr.size}")
    w = arr[:J].astype(float)
    return PosteriorApproximation(arr[J:].reshape(J, d).astype(float), w), header

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from pmcnet.ais import SamplerConfig, WeightedSampleSet, run_sampler
from pmcnet.errors import ConfigError, DataError, DegeneracyError
from pmcnet.model import NetworkSpec, predict
from pmcnet.posterior import (FPR_GRID, PosteriorApproximation, PredictiveDraws, build_posterior,
                              classification_metrics, confusion_matrices, golden_search_prior_variance,
                              golden_section_search, load_posterior, prediction_histogram, predictive_sample,
                              regression_metrics, roc_points, roc_with_envelopes, save_posterior,
                              select_iterations, write_roc_csv)
from helpers import GaussianTarget

PHI = (1 + math.sqrt(5)) / 2


def binary_draws(scores):
    scores = np.atleast_2d(np.asarray(scores, dtype=float))
    return PredictiveDraws(scores[:, :, None], np.arange(len(scores)))


def mann_whitney_auc(scores, labels):
    pos, neg = scores[labels == 1], scores[labels == 0]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


# -- particle posterior ---------------------------------------------------------------

def test_posterior_weights_validated():
    with pytest.raises(ConfigError):
        PosteriorApproximation(np.zeros((2, 3)), np.array([0.5, 0.6]))
    with pytest.raises(ConfigError):
        PosteriorApproximation(np.zeros((2, 3)), np.array([1.5, -0.5]))


def test_posterior_from_log_weights():
    post = PosteriorApproximation.from_log_weights(np.eye(3), np.log([1.0, 2.0, 1.0]))
    np.testing.assert_allclose(post.norm_weights, [0.25, 0.5, 0.25], rtol=1e-15)
    assert abs(post.norm_weights.sum() - 1) <= 1e-12
    np.testing.assert_allclose(post.mean(), [0.25, 0.5, 0.25])
    assert post.effective_sample_size() == pytest.approx(1 / (0.0625 * 2 + 0.25))


def test_posterior_degenerate():
    with pytest.raises(DegeneracyError):
        PosteriorApproximation.from_log_weights(np.eye(2), np.array([-np.inf, np.nan]))


def test_build_posterior_selection():
    sets = [WeightedSampleSet(np.full((2, 3, 1), float(t)), np.zeros((2, 3)), np.zeros((2, 3)), t) for t in (1, 2)]
    last = build_posterior(sets)
    assert last.size == 6 and np.all(last.particles == 2.0)
    pooled = build_posterior(sets, "all_iterations")
    assert pooled.size == 12 and pooled.mean()[0] == pytest.approx(1.5)
    with pytest.raises(ConfigError):
        build_posterior(sets, "middle")
    with pytest.raises(ConfigError):
        build_posterior([])


def test_build_posterior_from_trace():
    trace = run_sampler(GaussianTarget([0.0], [[1.0]]), SamplerConfig(M=3, K=4, T=2), np.zeros(1))
    post = build_posterior(trace)
    assert post.size == 12
    assert abs(post.norm_weights.sum() - 1) <= 1e-12


# -- predictive sampling ------------------------------------------------------------------

def test_predictive_sample_point_mass_and_shapes():
    spec = NetworkSpec((2, 3, 3), "tanh", "multinomial")
    rng = np.random.default_rng(0)
    particles = rng.standard_normal((4, spec.n_params))
    post = PosteriorApproximation(particles, np.array([0.0, 1.0, 0.0, 0.0]))
    X = rng.standard_normal((2, 5))
    draws = predictive_sample(post, spec, X, 7, np.random.default_rng(1))
    assert draws.outputs.shape == (7, 5, 3)
    assert np.all(draws.sampled_indices == 1)
    np.testing.assert_allclose(draws.outputs[3], predict(spec, particles[1], X)[0].T, rtol=1e-15)


def test_predictive_sample_frequencies():
    spec = NetworkSpec((1, 1), "identity", "gaussian")
    post = PosteriorApproximation(np.array([[0.0, 0.0], [0.0, 1.0]]), np.array([0.3, 0.7]))
    draws = predictive_sample(post, spec, np.zeros((1, 1)), 20_000, np.random.default_rng(2))
    assert np.mean(draws.outputs) == pytest.approx(0.7, abs=0.01)


def test_predictive_sample_errors():
    spec = NetworkSpec((1, 1), "identity", "gaussian")
    post = PosteriorApproximation.point_mass(np.zeros(3))
    with pytest.raises(DataError):
        predictive_sample(post, spec, np.zeros((1, 1)), 1, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        predictive_sample(PosteriorApproximation.point_mass(np.zeros(2)), spec, np.zeros((1, 1)), 0,
                          np.random.default_rng(0))


# -- classification metrics ---------------------------------------------------------------

def loop_binary_metrics(scores, y, threshold):
    tp = fp = tn = fn = 0
    for s, t in zip(scores, y):
        p = 1 if s > threshold else 0
        if p == 1 and t == 1:
            tp += 1
        elif p == 1:
            fp += 1
        elif t == 1:
            fn += 1
        else:
            tn += 1
    return dict(accuracy=(tp + tn) / len(y), precision=tp / (tp + fp), recall=tp / (tp + fn),
                specificity=tn / (tn + fp), f1=2 * tp / (2 * tp + fp + fn))


def test_binary_metrics_loop_oracle():
    rng = np.random.default_rng(3)
    y = (rng.random(40) < 0.4).astype(int)
    scores = np.clip(0.3 * y[None] + 0.6 * rng.random((6, 40)), 0, 1)
    report = classification_metrics(binary_draws(scores), y[None].astype(float), threshold=0.5)
    per = [loop_binary_metrics(s, y, 0.5) for s in scores]
    for name in ("accuracy", "precision", "recall", "specificity", "f1"):
        vals = np.array([p[name] for p in per])
        assert report.mean(name) == pytest.approx(vals.mean(), rel=1e-12)
        assert report.std(name) == pytest.approx(vals.std(), rel=1e-10, abs=1e-15)


def test_threshold_is_strict():
    report = classification_metrics(binary_draws([[0.5, 0.51]]), np.array([[0.0, 1.0]]))
    assert report.mean("accuracy") == 1.0


def test_multiclass_macro_loop_oracle():
    rng = np.random.default_rng(4)
    C, N = 3, 30
    truth = rng.integers(C, size=N)
    out = rng.dirichlet(np.ones(C), size=(5, N))
    Y = np.eye(C)[:, truth]
    report = classification_metrics(PredictiveDraws(out, np.arange(5)), Y)
    recalls, precisions = [], []
    for r in range(5):
        pred = out[r].argmax(axis=1)
        rec = [np.sum((pred == c) & (truth == c)) / np.sum(truth == c) for c in range(C)]
        prec = [np.sum((pred == c) & (truth == c)) / max(np.sum(pred == c), 1) if np.sum(pred == c) else np.nan
                for c in range(C)]
        recalls.append(np.mean(rec))
        precisions.append(np.nanmean(prec))
    assert report.mean("recall") == pytest.approx(np.mean(recalls), rel=1e-12)
    assert report.mean("precision") == pytest.approx(np.mean(precisions), rel=1e-12)


def test_perfect_multiclass_macro_f1():
    truth = np.array([0, 1, 2, 2, 1, 0, 2])
    out = np.eye(3)[truth][None].repeat(4, axis=0) * 0.8 + 0.2 / 3
    report = classification_metrics(PredictiveDraws(out, np.arange(4)), np.eye(3)[:, truth])
    assert report.mean("f1") == 1.0 and report.mean("accuracy") == 1.0
    assert report.std("f1") == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 5), st.integers(1, 8))
def test_confusion_rows_sum_to_support(seed, C, R):
    rng = np.random.default_rng(seed)
    truth = rng.integers(C, size=25)
    pred = rng.integers(C, size=(R, 25))
    cm = confusion_matrices(pred, truth, C)
    assert np.all(cm.sum(axis=(1, 2)) == 25)
    np.testing.assert_array_equal(cm.sum(axis=2), np.tile(np.bincount(truth, minlength=C), (R, 1)))
    for r in range(R):
        loop = np.zeros((C, C))
        for t, p in zip(truth, pred[r]):
            loop[t, p] += 1
        np.testing.assert_array_equal(cm[r], loop)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_metrics_invariant_to_draw_order(seed):
    rng = np.random.default_rng(seed)
    y = np.r_[0, 1, (rng.random(18) < 0.5).astype(int)]
    scores = rng.random((7, 20))
    a = classification_metrics(binary_draws(scores), y[None].astype(float), roc_ci_levels=(0.9,))
    b = classification_metrics(binary_draws(scores[rng.permutation(7)]), y[None].astype(float),
                               roc_ci_levels=(0.9,))
    for name in a.metrics:
        assert a.mean(name) == pytest.approx(b.mean(name), rel=1e-12, nan_ok=True)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_rates_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    y = (rng.random(15) < 0.5).astype(float)
    report = classification_metrics(binary_draws(rng.random((4, 15))), y[None])
    for m in report.metrics.values():
        assert math.isnan(m["mean"]) or 0 <= m["mean"] <= 1


def test_undefined_precision_flagged():
    report = classification_metrics(binary_draws([[0.1, 0.2], [0.9, 0.1]]), np.array([[1.0, 0.0]]))
    assert report.metrics["precision"]["undefined_draws"] == 1
    assert any("precision" in f for f in report.flags)


def test_point_mass_stds_vanish():
    spec = NetworkSpec((3, 3, 1), "tanh", "bernoulli")
    rng = np.random.default_rng(5)
    X = rng.standard_normal((3, 50))
    theta = rng.standard_normal(spec.n_params)
    y = (predict(spec, theta, X)[0] > 0.5).astype(float)
    draws = predictive_sample(PosteriorApproximation.point_mass(theta), spec, X, 500, rng)
    report = classification_metrics(draws, y, roc_ci_levels=(0.95,))
    for m in report.metrics.values():
        if not math.isnan(m["std"]):
            assert m["std"] < 1e-12


def test_single_draw_flag():
    report = classification_metrics(binary_draws([[0.9, 0.1]]), np.array([[1.0, 0.0]]))
    assert report.std("accuracy") == 0.0
    assert any("single draw" in f for f in report.flags)


# -- ROC --------------------------------------------------------------------------------

def test_roc_perfect_scores():
    y = np.array([[0, 0, 1, 1, 1.0]])
    roc = roc_with_envelopes(binary_draws([[0.1, 0.2, 0.8, 0.9, 0.7]]), y)
    assert roc.auc_mean == pytest.approx(1.0)
    assert roc.mean_tpr[0] == 1.0


def test_roc_chance_level():
    rng = np.random.default_rng(6)
    y = (rng.random(2000) < 0.5).astype(float)
    roc = roc_with_envelopes(binary_draws(rng.random(2000)), y[None])
    assert abs(roc.auc_mean - 0.5) < 0.05


def test_roc_auc_matches_rank_statistic():
    # scores on the threshold grid and 20 negatives: every breakpoint lands on the FPR grid
    rng = np.random.default_rng(7)
    thr = np.linspace(0, 1, 1001)
    y = np.r_[np.zeros(20), np.ones(13)].astype(int)
    for _ in range(5):
        scores = thr[rng.integers(0, 1001, size=33)]
        scores[:3] = scores[20:23]         # force ties across classes
        roc = roc_with_envelopes(binary_draws(scores), y[None].astype(float))
        assert roc.auc_mean == pytest.approx(mann_whitney_auc(scores, y), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6))
def test_roc_auc_rank_statistic_heavy_ties(seed, levels):
    rng = np.random.default_rng(seed)
    y = np.r_[0, 1, (rng.random(25) < 0.5).astype(int)]
    scores = np.linspace(0, 1, 1001)[rng.integers(0, levels, size=27) * (1000 // levels)]
    roc = roc_with_envelopes(binary_draws(scores), y[None].astype(float))
    assert roc.auc_mean == pytest.approx(mann_whitney_auc(scores, y), abs=1e-12)


def test_roc_points_ge_rule():
    fpr, tpr = roc_points(np.array([0.5, 0.5]), np.array([False, True]), np.array([0.5, 0.6]))
    np.testing.assert_array_equal(fpr[0], [1.0, 0.0])
    np.testing.assert_array_equal(tpr[0], [1.0, 0.0])


def test_roc_single_draw_envelopes_coincide():
    y = np.array([[0, 1, 0, 1, 1.0]])
    roc = roc_with_envelopes(binary_draws([[0.3, 0.6, 0.7, 0.2, 0.9]]), y, ci_levels=(0.8, 0.95))
    for lo, hi in roc.envelopes.values():
        np.testing.assert_array_equal(lo, roc.tpr[0])
        np.testing.assert_array_equal(hi, roc.tpr[0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 12))
def test_mean_curve_auc_within_draw_range(seed, R):
    rng = np.random.default_rng(seed)
    y = np.r_[0, 1, (rng.random(30) < 0.5).astype(int)].astype(float)
    roc = roc_with_envelopes(binary_draws(rng.random((R, 32)) * 0.5 + 0.4 * y), y[None], ci_levels=(0.5, 0.95))
    assert roc.auc.min() - 1e-12 <= roc.mean_curve_auc() <= roc.auc.max() + 1e-12
    assert roc.mean_curve_auc() == pytest.approx(roc.auc_mean, abs=1e-12)
    lo95, hi95 = roc.envelopes[0.95]
    lo50, hi50 = roc.envelopes[0.5]
    assert np.all(lo95 <= lo50 + 1e-15) and np.all(hi50 <= hi95 + 1e-15)
    assert np.all(np.diff(roc.mean_tpr) >= -1e-15)


def test_roc_single_class_error():
    with pytest.raises(DataError):
        roc_with_envelopes(binary_draws([[0.2, 0.8]]), np.array([[1.0, 1.0]]))
    report = classification_metrics(binary_draws([[0.2, 0.8]]), np.array([[1.0, 1.0]]), roc_ci_levels=(0.95,))
    assert "auc" not in report.metrics
    assert any("one class" in f for f in report.flags)


def test_roc_multiclass_one_vs_all():
    truth = np.array([0, 1, 2, 0, 1, 2])
    out = np.eye(3)[truth][None] * 0.9 + 0.1 / 3
    roc = roc_with_envelopes(PredictiveDraws(out, np.zeros(1, int)), np.eye(3)[:, truth])
    assert roc.auc_mean == pytest.approx(1.0)
    np.testing.assert_allclose(roc.per_class_auc, 1.0)


def test_roc_csv(tmp_path):
    y = np.array([[0, 1, 0, 1.0]])
    roc = roc_with_envelopes(binary_draws([[0.3, 0.6, 0.7, 0.9], [0.1, 0.6, 0.2, 0.9]]), y, ci_levels=(0.8, 0.95))
    p = tmp_path / "roc.csv"
    write_roc_csv(p, roc)
    lines = p.read_text().splitlines()
    assert lines[0] == "fpr,mean_tpr,lo_tpr_0.8,hi_tpr_0.8,lo_tpr_0.95,hi_tpr_0.95"
    assert len(lines) == 1 + len(FPR_GRID)


# -- regression and histograms -------------------------------------------------------------

def test_regression_exact_and_offset():
    Y = np.array([[1.0, 2.0, 3.0]])
    exact = PredictiveDraws(np.tile(Y.T, (3, 1, 1)), np.arange(3))
    assert regression_metrics(exact, Y).mean("mse") == 0.0
    shifted = PredictiveDraws(np.tile(Y.T + 0.7, (3, 1, 1)), np.arange(3))
    assert regression_metrics(shifted, Y).mean("mse") == pytest.approx(0.49)


def test_regression_loop_oracle():
    rng = np.random.default_rng(8)
    R, N, dy = 4, 6, 2
    out = rng.standard_normal((R, N, dy))
    Y = rng.standard_normal((dy, N))
    mses = []
    for r in range(R):
        s = 0.0
        for n in range(N):
            for j in range(dy):
                s += (out[r, n, j] - Y[j, n]) ** 2
        mses.append(s / (N * dy))
    rep = regression_metrics(PredictiveDraws(out, np.arange(R)), Y)
    assert rep.mean("mse") == pytest.approx(np.mean(mses), rel=1e-12)
    assert rep.std("mse") == pytest.approx(np.std(mses), rel=1e-12)
    assert rep.squared_errors.shape == (N,)


def test_histogram_identical_draws():
    counts = prediction_histogram(binary_draws(np.full((9, 2), 0.33)), 1)
    assert counts.sum() == 9 and np.count_nonzero(counts) == 1 and counts[3] == 9


def test_histogram_uniform_draws():
    draws = binary_draws(np.random.default_rng(9).random((10_000, 1)))
    counts = prediction_histogram(draws, 0, bins=10)
    assert counts.sum() == 10_000
    assert stats.chisquare(counts).pvalue > 0.01


def test_histogram_needs_binary():
    with pytest.raises(DataError):
        prediction_histogram(PredictiveDraws(np.zeros((2, 3, 2)), np.arange(2)), 0)


# -- tuning helpers ---------------------------------------------------------------------------

def test_golden_flat_returns_midpoint():
    res = golden_section_search(lambda x: 1.0, -2.0, 2.0, 6)
    assert res.best == pytest.approx(0.0, abs=1e-12)
    res = golden_section_search(lambda x: 1.0, 0.0, 3.0, 4)
    assert res.best == pytest.approx(1.5, abs=1e-12)


@pytest.mark.parametrize("peak", [-1.7, -0.3, 0.0, 0.37, 1.9])
def test_golden_unimodal_within_tolerance(peak):
    res = golden_section_search(lambda x: -(x - peak) ** 2, -2.0, 2.0, 6)
    assert abs(res.best - peak) < 4.0 / PHI ** 4
    assert res.bracket[1] - res.bracket[0] <= 4.0 / PHI ** 6 + 1e-12


def test_golden_minimize():
    res = golden_section_search(lambda x: (x - 1.0) ** 2, -2.0, 2.0, 10, maximize=False)
    assert abs(res.best - 1.0) < 4.0 / PHI ** 10


def test_golden_budget_exact():
    calls = []
    res = golden_section_search(lambda x: calls.append(x) or -(x - 0.3) ** 2, -2.0, 2.0, 6)
    assert res.iterations == 6
    # two points to start, then one new point per iteration
    assert len(calls) == len(res.evaluations) == 7
    assert golden_section_search(lambda x: 0.0, -2.0, 2.0, 0).evaluations == []


def test_golden_degenerate_interval():
    with pytest.raises(ConfigError):
        golden_section_search(lambda x: x, 1.0, 1.0, 3)


def test_golden_prior_variance_log_scale():
    var, res = golden_search_prior_variance(lambda v: -(math.log10(v) - 0.5) ** 2, (-2.0, 2.0), 12)
    assert var == pytest.approx(10 ** 0.5, rel=0.01)
    assert all(-2 <= x <= 2 for x, _ in res.evaluations)


def test_select_iterations_plateau():
    T, scores = select_iterations([10, 20, 30, 40, 50], lambda T: 0.9 * min(T, 30) / 30)
    assert T == 30 and len(scores) == 5


def test_select_iterations_tolerance_and_single():
    assert select_iterations([20], lambda T: 0.1)[0] == 20
    T, _ = select_iterations([10, 20, 30], lambda T: {10: 0.80, 20: 0.897, 30: 0.90}[T])
    assert T == 20
    T, _ = select_iterations([10, 20], lambda T: {10: 0.5, 20: 0.2}[T], maximize=False)
    assert T == 20
    with pytest.raises(ConfigError):
        select_iterations([], lambda T: 0.0)


# -- serialisation -----------------------------------------------------------------------------

def test_posterior_file_roundtrip(tmp_path):
    rng = np.random.default_rng(10)
    w = rng.random(5)
    post = PosteriorApproximation(rng.standard_normal((5, 3)), w / w.sum())
    p, q = tmp_path / "a.bin", tmp_path / "b.bin"
    save_posterior(p, post, {"config_digest": "abc", "seed": 1})
    save_posterior(q, post, {"seed": 1, "config_digest": "abc"})
    assert p.read_bytes() == q.read_bytes()
    back, header = load_posterior(p)
    assert header["config_digest"] == "abc" and header["J"] == 5
    assert np.array_equal(back.particles, post.particles)
    assert np.array_equal(back.norm_weights, post.norm_weights)


def test_posterior_file_truncated(tmp_path):
    p = tmp_path / "a.bin"
    save_posterior(p, PosteriorApproximation.point_mass(np.zeros(3)), {})
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(DataError):
        load_posterior(p)

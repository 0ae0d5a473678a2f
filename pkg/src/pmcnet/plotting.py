"""Figures written next to the CSV outputs (non-interactive Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

DPI = 120
BAND_ALPHA = {0.8: 0.45, 0.95: 0.3, 0.99: 0.15}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI, metadata={"Software": None})
    plt.close(fig)
    return path


def roc_figure(path, roc, title: str = "") -> Path:
    """Mean ROC curve with pointwise credible envelopes (widest level drawn first)."""
    fig, ax = plt.subplots(figsize=(4.2, 4.0))
    for level in sorted(roc.envelopes, reverse=True):
        lo, hi = roc.envelopes[level]
        ax.fill_between(roc.fpr, lo, hi, color="tab:blue", alpha=BAND_ALPHA.get(level, 0.25), lw=0,
                        label=f"{100 * level:g}% CI")
    ax.plot(roc.fpr, roc.mean_tpr, color="k", lw=1.2, label=f"mean (AUC {roc.auc_mean:.3f})")
    ax.plot([0, 1], [0, 1], color="0.6", lw=0.8, ls=":")
    ax.set(xlim=(0, 1), ylim=(0, 1.01), xlabel="false positive rate", ylabel="true positive rate", title=title)
    ax.legend(loc="lower right", fontsize=8, frameon=False)
    return _save(fig, path)


def histogram_figure(path, histograms: dict[int, np.ndarray], labels: dict[int, float] | None = None) -> Path:
    """One bar panel per test sample: counts of the predictive draws over [0, 1]."""
    n = len(histograms)
    fig, axes = plt.subplots(1, n, figsize=(2.4 * n, 2.4), squeeze=False, sharey=True)
    for ax, (idx, counts) in zip(axes[0], histograms.items()):
        edges = np.linspace(0, 1, len(counts) + 1)
        ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge", color="tab:gray", edgecolor="k", lw=0.5)
        title = f"sample {idx}"
        if labels is not None and idx in labels:
            title += f" (y={labels[idx]:g})"
        ax.set(xlim=(0, 1), xlabel="predicted probability", title=title)
    axes[0][0].set_ylabel("draws")
    return _save(fig, path)


def iteration_curves_figure(path, curves: dict[str, dict[str, np.ndarray]], metrics=("auc", "accuracy")) -> Path:
    """Test metrics along sampler iterations, one line per variant."""
    fig, axes = plt.subplots(1, len(metrics), figsize=(4.2 * len(metrics), 3.4), squeeze=False)
    for ax, metric in zip(axes[0], metrics):
        for name, c in curves.items():
            if metric in c:
                ax.plot(c["iteration"], c[metric], marker="o", ms=3, lw=1, label=name)
        ax.set(xlabel="iteration", ylabel=metric)
    axes[0][-1].legend(fontsize=8, frameon=False)
    return _save(fig, path)


def squared_error_figure(path, errors: dict[str, np.ndarray]) -> Path:
    """Box plot of per-sample squared errors, one box per method."""
    fig, ax = plt.subplots(figsize=(1.6 + 1.2 * len(errors), 3.4))
    ax.boxplot(list(errors.values()), showfliers=False)
    ax.set_xticks(range(1, len(errors) + 1), list(errors))
    ax.set(ylabel="squared error")
    return _save(fig, path)


def diagnostics_figure(path, diagnostics) -> Path:
    """Normalised ESS and mean log target per iteration."""
    it = [d.iteration for d in diagnostics]
    fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3.2))
    a.plot(it, [d.ess for d in diagnostics], marker="o", ms=3, lw=1)
    a.set(xlabel="iteration", ylabel="ESS / MK", yscale="log")
    b.plot(it, [d.max_log_target for d in diagnostics], marker="o", ms=3, lw=1, label="max")
    b.set(xlabel="iteration", ylabel="log target")
    b.legend(fontsize=8, frameon=False)
    return _save(fig, path)

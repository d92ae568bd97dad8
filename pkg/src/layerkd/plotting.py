"""Figures written next to the text reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STRATEGY_COLORS = {
    "none": "#7f7f7f",
    "forward": "#348abd",
    "reverse": "#e24a33",
    "all_to_one": "#988ed5",
    "random": "#8eba42",
}

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def figsize(width: float = 6.0, ratio: float | None = None) -> tuple[float, float]:
    ratio = (np.sqrt(5.0) - 1.0) / 2.0 if ratio is None else ratio
    return width, width * ratio


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def strategy_bars(blocks: dict, metric: str, path) -> Path:
    """Grouped bars: one group per (init, depth) block, one bar per strategy.

    ``blocks`` maps a block label to ``{strategy: (mean, std)}``.
    """
    labels = list(blocks)
    strategies = [s for s in STRATEGY_COLORS if any(s in blocks[b] for b in labels)]
    width = 0.8 / max(1, len(strategies))
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=figsize(max(4.0, 1.6 * len(labels))))
        x = np.arange(len(labels))
        for j, strat in enumerate(strategies):
            means = [blocks[b].get(strat, (np.nan, 0.0))[0] for b in labels]
            stds = [blocks[b].get(strat, (np.nan, 0.0))[1] for b in labels]
            ax.bar(x + (j - (len(strategies) - 1) / 2) * width, means, width, yerr=stds,
                   color=STRATEGY_COLORS[strat], label=strat, capsize=2)
        ax.set_xticks(x)
        ax.set_xticklabels(labels)
        ax.set_ylabel(f"dev {metric}")
        finite = [v[0] for b in labels for v in blocks[b].values() if np.isfinite(v[0])]
        if finite:
            ax.set_ylim(max(0.0, min(finite) - 0.1), min(1.0, max(finite) + 0.05))
        ax.legend(ncol=len(strategies), loc="lower center", bbox_to_anchor=(0.5, 1.0), frameon=False)
        return _save(fig, path)


def angle_histograms(report, path) -> Path:
    """Per-student-layer histograms of teacher-pair cosines."""
    edges = np.linspace(-1.0, 1.0, report.hist.shape[1] + 1)
    centers = 0.5 * (edges[:-1] + edges[1:])
    n = report.student_layers
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, n, figsize=(2.4 * n, 2.2), sharey=True, squeeze=False)
        for s, ax in enumerate(axes[0]):
            counts = report.hist[s]
            total = counts.sum()
            ax.bar(centers, counts / total if total else counts, width=edges[1] - edges[0], color="#348abd")
            ax.axvline(0.0, color="k", lw=0.6, ls=":")
            ax.set_title(f"student layer {s + 1}")
            ax.set_xlabel("cosine")
        axes[0][0].set_ylabel("fraction")
        return _save(fig, path)


def angle_heatmaps(report, path) -> Path:
    """Mean cosine over teacher-layer pairs, one panel per student layer."""
    n, lt = report.student_layers, report.teacher_layers
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, n, figsize=(2.6 * n, 2.4), squeeze=False)
        for s, ax in enumerate(axes[0]):
            m = np.where(report.count[s] > 0, report.mean[s], np.nan)
            m = np.triu(m, k=1) + np.triu(m, k=1).T
            np.fill_diagonal(m, np.nan)
            im = ax.imshow(m, vmin=-1, vmax=1, cmap="RdBu_r", origin="lower",
                           extent=(0.5, lt + 0.5, 0.5, lt + 0.5))
            ax.set_title(f"student layer {s + 1}")
            ax.set_xlabel("teacher layer")
        axes[0][0].set_ylabel("teacher layer")
        fig.colorbar(im, ax=axes[0].tolist(), shrink=0.8, label="mean cosine")
        return _save(fig, path)

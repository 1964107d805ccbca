"""Figure rendering for exported sweeps: one PNG per (mode, metric) with a
mean curve per series and a min/max band over seeds."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

_METRIC_LABELS = {
    "accuracy": "Accuracy",
    "adv_accuracy": "Adversarial accuracy",
    "ece": "ECE",
    "nll": "NLL",
    "roc_auc": "OoD ROC-AUC",
}

_SERIES_COLORS = {
    "adversarial": "tab:red",
    "natural": "tab:blue",
    "random_smoothing": "tab:green",
}


def render_sweep_figures(tables: dict, out_dir) -> list:
    """tables: (mode, metric) -> {series -> {sparsity -> [values]}}."""
    out_dir = Path(out_dir)
    written = []
    for (mode, metric), series in sorted(tables.items()):
        fig, ax = plt.subplots(figsize=(5.0, 3.4))
        for label in sorted(series):
            pre_scheme = label.split("_", 1)[0]
            sparsities = np.array(sorted(series[label]))
            means = np.array([np.mean(series[label][s]) for s in sparsities])
            lows = np.array([np.min(series[label][s]) for s in sparsities])
            highs = np.array([np.max(series[label][s]) for s in sparsities])
            color = _SERIES_COLORS.get(pre_scheme)
            ax.plot(sparsities, means, marker="o", label=label, color=color)
            ax.fill_between(sparsities, lows, highs, alpha=0.15, color=color)
        ax.set_xlabel("sparsity")
        ax.set_ylabel(_METRIC_LABELS.get(metric, metric))
        ax.set_title(f"{mode}: {_METRIC_LABELS.get(metric, metric)} vs sparsity")
        ax.grid(True, alpha=0.3)
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = out_dir / f"{mode}_{metric}.png"
        fig.savefig(path, dpi=150)
        plt.close(fig)
        written.append(path)
    return written

"""Figure rendering for simulation curves, training logs, per-video
score traces, and hyperparameter sweeps.

Every function writes one PNG next to the delimited output it
illustrates and returns the path. The non-interactive Agg backend is
selected before pyplot loads, so rendering works headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "plot_separability_curve",
    "plot_training_curves",
    "plot_video_scores",
    "plot_sweep",
]


def plot_separability_curve(curve, path, mu=None):
    """Expected top-k separability vs k: both Monte-Carlo estimators with
    error bars, the analytic mixture curve, and optionally the abnormal
    snippet count as a vertical marker."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.errorbar(curve.k, curve.empirical_mean, yerr=curve.empirical_se,
                marker="o", capsize=3, label="mixture Monte Carlo")
    ax.plot(curve.k, curve.analytic, linestyle="--", color="black",
            label="analytic")
    ax.errorbar(curve.k, curve.order_mean, yerr=curve.order_se,
                marker="s", capsize=3, label="order statistics")
    if mu is not None:
        ax.axvline(mu, color="gray", linewidth=0.8, linestyle=":",
                   label=f"abnormal count mu = {mu}")
    ax.set_xlabel("k (snippets averaged)")
    ax.set_ylabel("expected separability")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_training_curves(log_rows, path):
    """Loss components, batch magnitude statistics, and per-epoch
    validation AUC against the global step."""
    steps = [r["step"] for r in log_rows]
    val_points = [(r["step"], r["val_auc"]) for r in log_rows
                  if r["val_auc"] is not None]
    n_panels = 3 if val_points else 2
    fig, axes = plt.subplots(n_panels, 1, figsize=(7, 2.6 * n_panels),
                             sharex=True)
    axes[0].plot(steps, [r["loss_total"] for r in log_rows], label="total")
    axes[0].plot(steps, [r["loss_s"] for r in log_rows], label="magnitude")
    axes[0].plot(steps, [r["loss_f"] for r in log_rows], label="classifier")
    axes[0].set_ylabel("loss")
    axes[0].legend(fontsize="small")
    axes[1].plot(steps, [r["g_abn"] for r in log_rows], label="abnormal")
    axes[1].plot(steps, [r["g_norm"] for r in log_rows], label="normal")
    axes[1].set_ylabel("top-k mean magnitude")
    axes[1].legend(fontsize="small")
    if val_points:
        axes[2].plot(*zip(*val_points), marker="o")
        axes[2].set_ylabel("val AUC")
        axes[2].set_ylim(0.0, 1.05)
    axes[-1].set_xlabel("step")
    for ax in axes:
        ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def _label_runs(labels):
    """Half-open [start, end) index ranges where labels == 1."""
    runs = []
    start = None
    for i, value in enumerate(labels):
        if value == 1 and start is None:
            start = i
        elif value == 0 and start is not None:
            runs.append((start, i))
            start = None
    if start is not None:
        runs.append((start, len(labels)))
    return runs


def plot_video_scores(sequence, path):
    """One video's anomaly scores and feature magnitudes over time, with
    ground-truth abnormal spans shaded."""
    t = np.arange(len(sequence.scores))
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.plot(t, sequence.scores, color="tab:red", label="anomaly score")
    ax.set_ylim(-0.02, 1.02)
    ax.set_xlabel("snippet")
    ax.set_ylabel("score", color="tab:red")
    twin = ax.twinx()
    twin.plot(t, sequence.magnitudes, color="tab:blue", linestyle="--",
              label="feature magnitude")
    twin.set_ylabel("magnitude", color="tab:blue")
    for start, end in _label_runs(sequence.labels):
        ax.axvspan(start - 0.5, end - 0.5, color="orange", alpha=0.25)
    title = sequence.video_id or "video"
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_sweep(points, path):
    """Evaluation AUC against the swept hyperparameter."""
    values = [p.value for p in points]
    aucs = [p.auc for p in points]
    axis = points[0].axis if points else "value"
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(values, aucs, marker="o")
    ax.set_xlabel("top-k count k" if axis == "k" else "margin m")
    ax.set_ylabel("AUC")
    ax.set_ylim(0.0, 1.05)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path

"""Figure rendering for the CLI report paths (written next to the CSVs)."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "save_running_average_figure",
    "save_residual_figure",
    "save_fusion_figure",
]

_SAVE_KWARGS = dict(dpi=120, metadata={"Software": "calibkit"})


def save_running_average_figure(trace, path):
    """Running-average convergence: translation components and quaternion
    components against the number of averaged runs."""
    trace = np.asarray(trace)
    iters = np.arange(1, len(trace) + 1)
    fig, (ax_t, ax_q) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    for k, label in enumerate(("x", "y", "z")):
        ax_t.plot(iters, trace[:, k], label=label)
    ax_t.set_ylabel("translation [m]")
    ax_t.legend(loc="best", fontsize=8)
    ax_t.grid(alpha=0.3)
    for k, label in enumerate(("w", "x", "y", "z")):
        ax_q.plot(iters, trace[:, 3 + k], label=label)
    ax_q.set_ylabel("quaternion")
    ax_q.set_xlabel("runs averaged")
    ax_q.legend(loc="best", fontsize=8)
    ax_q.grid(alpha=0.3)
    fig.suptitle("Running average of calibration runs")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KWARGS)
    plt.close(fig)


def save_residual_figure(residuals, units, path):
    residuals = np.asarray(residuals)
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.stem(np.arange(len(residuals)), residuals)
    rmse = math.sqrt(np.mean(residuals**2)) if len(residuals) else 0.0
    ax.axhline(rmse, color="tab:red", linestyle="--", label=f"rmse = {rmse:.4g} {units}")
    ax.set_xlabel("correspondence index")
    ax.set_ylabel(f"residual [{units}]")
    ax.legend(loc="best", fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KWARGS)
    plt.close(fig)


def save_fusion_figure(report, path):
    """Range-binned divergence bars plus the headline fusion metrics."""
    edges = np.asarray(report.bin_edges_m)
    means = np.asarray(report.bin_mean_nn_m)
    centers = (edges[:-1] + edges[1:]) / 2.0
    widths = np.diff(edges)
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(centers, np.nan_to_num(means), width=widths * 0.9, color="tab:blue", alpha=0.8)
    ax.set_xlabel("range from origin [m]")
    ax.set_ylabel("mean NN distance [m]")
    ax.set_title(
        f"mean NN = {report.mean_nn_m:.4g} m, "
        f"duplication score = {report.duplication_score:.3f}"
    )
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KWARGS)
    plt.close(fig)

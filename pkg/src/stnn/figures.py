"""Matplotlib rendering of the report outputs.

Every CLI command that writes a delimited report also drops a PNG next to it
so runs can be eyeballed without loading the CSVs. All figures use the Agg
backend and fixed sizes/dpi so reruns are byte-identical.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_DPI = 120
# strip the writer's version string so rerenders are byte-identical
_PNG_METADATA = {"Software": None}


def _save(fig, path):
    fig.savefig(path, dpi=_DPI, metadata=_PNG_METADATA)
    plt.close(fig)
    return path


def training_curve(trace, path):
    """Loss components per epoch on a log scale."""
    epochs = [e.epoch for e in trace]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(epochs, [e.loss.total for e in trace], label="total", lw=1.6)
    ax.plot(epochs, [e.loss.reconstruction for e in trace], label="reconstruction", lw=1.0)
    ax.plot(epochs, [e.loss.dynamics for e in trace], label="dynamics", lw=1.0)
    if any(e.loss.l1_gamma > 0 for e in trace):
        ax.plot(epochs, [e.loss.l1_gamma for e in trace], label="|gamma|", lw=1.0)
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(frameon=False)
    fig.tight_layout()
    return _save(fig, path)


def forecast_lines(history: np.ndarray, predictions: np.ndarray, path, max_series: int = 8):
    """Recent history with the forecast appended, a line per series."""
    hist2d = history.reshape(history.shape[0], -1)
    pred2d = predictions.reshape(predictions.shape[0], -1)
    tail = hist2d[-min(50, hist2d.shape[0]):]
    t_hist = np.arange(-tail.shape[0] + 1, 1)
    t_pred = np.arange(1, pred2d.shape[0] + 1)
    fig, ax = plt.subplots(figsize=(7, 4))
    for col in range(min(max_series, hist2d.shape[1])):
        line, = ax.plot(t_hist, tail[:, col], lw=1.0)
        ax.plot(t_pred, pred2d[:, col], lw=1.0, ls="--", color=line.get_color())
    ax.axvline(0.5, color="grey", lw=0.8)
    ax.set_xlabel("steps from forecast origin")
    ax.set_ylabel("value")
    fig.tight_layout()
    return _save(fig, path)


def rmse_by_horizon(summary: dict, path):
    """Per-horizon RMSE, one line per model."""
    fig, ax = plt.subplots(figsize=(7, 4))
    for name, stats in summary.items():
        vals = stats["per_horizon"]
        ax.plot(range(1, len(vals) + 1), vals, marker="o", label=name)
    ax.set_xlabel("horizon")
    ax.set_ylabel("RMSE")
    ax.legend(frameon=False)
    fig.tight_layout()
    return _save(fig, path)


def grid_response(rows: list[dict], path):
    """RMSE against every hyperparameter that was actually swept."""
    keys = [k for k in ("latent_dim", "lambda", "gamma", "powers")
            if len({row[k] for row in rows}) > 1]
    if not keys:
        keys = ["lambda"]
    fig, axes = plt.subplots(1, len(keys), figsize=(4 * len(keys), 3.5), squeeze=False)
    for ax, key in zip(axes[0], keys):
        buckets: dict = {}
        for row in rows:
            if row["rmse"] == row["rmse"]:
                buckets.setdefault(row[key], []).append(row["rmse"])
        xs = sorted(buckets, key=lambda v: (v is None, v))
        ys = [min(buckets[x]) for x in xs]
        ax.plot(range(len(xs)), ys, marker="o")
        ax.set_xticks(range(len(xs)))
        ax.set_xticklabels([str(x) for x in xs], fontsize=8)
        ax.set_xlabel(key)
        ax.set_ylabel("best RMSE")
    fig.tight_layout()
    return _save(fig, path)


def correlation_heatmaps(effective: list, path):
    """|weight| heatmap per effective relation matrix."""
    count = len(effective)
    fig, axes = plt.subplots(1, count, figsize=(4 * count, 3.5), squeeze=False)
    for ax, (label, mat) in zip(axes[0], effective):
        im = ax.imshow(np.abs(mat), cmap="viridis")
        ax.set_title(label, fontsize=9)
        ax.set_xlabel("source j")
        ax.set_ylabel("target i")
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    return _save(fig, path)


def dominant_relation_strip(dominant: np.ndarray, labels: list[str], path):
    """Dominant relation index per series as a one-row heatmap."""
    fig, ax = plt.subplots(figsize=(7, 1.8))
    im = ax.imshow(dominant[None, :], aspect="auto", cmap="tab10",
                   vmin=0, vmax=max(9, len(labels) - 1))
    ax.set_yticks([])
    ax.set_xlabel("series")
    cbar = fig.colorbar(im, ax=ax, ticks=range(len(labels)), fraction=0.1)
    cbar.ax.set_yticklabels(labels[: len(labels)], fontsize=7)
    fig.tight_layout()
    return _save(fig, path)

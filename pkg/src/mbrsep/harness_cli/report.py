"""Figures rendered next to the CSV/JSON outputs."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

METRICS = ("sdr_db", "sir_db", "sar_db")


def plot_loss_curve(history: list[dict], path) -> Path:
    epochs = [h["epoch"] for h in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [h["train_loss"] for h in history], marker="o", label="train")
    ax.plot(epochs, [h["valid_loss"] for h in history], marker="s", label="validation")
    drops = [h["epoch"] for prev, h in zip(history, history[1:]) if h["learning_rate"] < prev["learning_rate"]]
    for e in drops:
        ax.axvline(e - 0.5, color="grey", linestyle=":", linewidth=1)
    ax.set_xlabel("epoch")
    ax.set_ylabel("MSE")
    ax.set_yscale("log")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_metric_boxes(rows: list[dict], path) -> Path:
    """One panel per metric, one box per model label (capped values as written to CSV)."""
    models = list(dict.fromkeys(r["model"] for r in rows))
    fig, axes = plt.subplots(1, len(METRICS), figsize=(4 * len(METRICS), 4))
    for ax, metric in zip(axes, METRICS):
        data = [[r[metric] for r in rows if r["model"] == m] for m in models]
        ax.boxplot(data, showmeans=False)
        ax.set_xticks(range(1, len(models) + 1), models, rotation=20)
        ax.set_title(metric.replace("_db", "").upper() + " (dB)")
        ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path

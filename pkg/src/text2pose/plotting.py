"""Figure rendering for training and evaluation reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def save_loss_curve(history, path) -> None:
    """history: iterable of (step, loss, smoothed_loss)."""
    steps, losses, smoothed = zip(*history)
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, losses, lw=0.5, alpha=0.4, label="loss")
    ax.plot(steps, smoothed, lw=1.5, label="smoothed")
    ax.set_xlabel("step")
    ax.set_ylabel("noise-prediction MSE")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_loss_comparison(histories: dict, path) -> None:
    """histories: variant name -> history list."""
    fig, ax = plt.subplots(figsize=(7, 4))
    for name, history in histories.items():
        steps, _, smoothed = zip(*history)
        ax.plot(steps, smoothed, lw=1.5, label=name)
    ax.set_xlabel("step")
    ax.set_ylabel("smoothed noise-prediction MSE")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_schedule_plot(schedule, path) -> None:
    ts = np.arange(1, schedule.steps + 1)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(ts, schedule.beta)
    ax1.set_xlabel("t")
    ax1.set_ylabel("beta")
    ax2.plot(ts, schedule.alpha_bar)
    ax2.set_xlabel("t")
    ax2.set_ylabel("cumulative alpha")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_metrics_figure(report, path) -> None:
    """Per-caption MSE / variance bars for a MetricsReport."""
    entries = report.per_caption
    labels = [e["record_id"] for e in entries]
    mses = [e["mse"] if e["mse"] is not None else float("nan") for e in entries]
    variances = [
        e["variance"] if e["variance"] is not None else float("nan") for e in entries
    ]
    x = np.arange(len(labels))
    fig, ax = plt.subplots(figsize=(max(6, 0.5 * len(labels)), 4))
    ax.bar(x - 0.2, mses, width=0.4, label="MSE")
    ax.bar(x + 0.2, variances, width=0.4, label="variance")
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=7)
    ax.set_ylabel("grid px^2")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)

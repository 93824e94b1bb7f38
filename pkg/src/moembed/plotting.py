"""Figures for ablation reports, rendered headless to PNG."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_batch_sweep(summary: Sequence[Mapping], path, metric: str = "ndcg@10") -> Path:
    """Line plot of mean score vs batch size, one line per model, with std error bars.

    ``summary`` rows need ``model``, ``batch_size``, ``mean`` and ``std``.
    """
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    models = list(dict.fromkeys(r["model"] for r in summary))
    for name in models:
        rows = sorted((r for r in summary if r["model"] == name), key=lambda r: r["batch_size"])
        ax.errorbar(
            [r["batch_size"] for r in rows],
            [r["mean"] for r in rows],
            yerr=[r["std"] for r in rows],
            marker="o",
            capsize=3,
            label=name,
        )
    ax.set_xscale("log", base=2)
    ax.set_xlabel("batch size")
    ax.set_ylabel(metric)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_bars(labels: Sequence[str], means: Sequence[float], stds: Sequence[float], path, metric: str = "ndcg@10") -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    ax.bar(range(len(labels)), means, yerr=stds, capsize=4, color="#4c72b0")
    ax.set_xticks(range(len(labels)), labels)
    ax.set_ylabel(metric)
    lo = min(m - s for m, s in zip(means, stds))
    ax.set_ylim(max(0.0, lo - 0.05), None)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_curve(values: Sequence[float], path, ylabel: str, smooth: Sequence[float] | None = None) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(values, alpha=0.4, label="per step")
    if smooth is not None:
        ax.plot(range(len(values) - len(smooth), len(values)), smooth, label="moving average")
        ax.legend()
    ax.set_xlabel("step")
    ax.set_ylabel(ylabel)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path

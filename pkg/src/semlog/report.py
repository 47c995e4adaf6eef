"""Figure rendering for training and evaluation reports.

Every report-writing CLI path renders a figure next to its JSON output.
The Agg backend is forced so rendering works headless.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402 (backend must be set first)


def plot_loss_curve(history: Sequence[float], path: str,
                    title: str = "Training loss") -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(range(1, len(history) + 1), history, marker="o", markersize=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_metric_bars(metrics: Mapping[str, float], path: str,
                     title: str = "Metrics") -> None:
    names = list(metrics)
    values = [metrics[n] for n in names]
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(names)), 4))
    bars = ax.bar(names, values, color="#4878a8")
    for bar, value in zip(bars, values):
        ax.text(bar.get_x() + bar.get_width() / 2, bar.get_height(),
                "%.3f" % value, ha="center", va="bottom", fontsize=9)
    ax.set_ylim(0, 1.05 if max(values, default=1.0) <= 1.0 else None)
    ax.set_title(title)
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_histogram(values: Sequence[float], path: str,
                   title: str = "Histogram", xlabel: str = "value") -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    bins = max(5, min(30, len(set(values))))
    ax.hist(values, bins=bins, color="#4878a8", edgecolor="white")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("count")
    ax.set_title(title)
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_recall_at_k(recalls: Mapping[int, float], path: str,
                     title: str = "Recall@k") -> None:
    ks = sorted(recalls)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(ks, [recalls[k] for k in ks], marker="s")
    ax.set_xticks(ks)
    ax.set_xlabel("k")
    ax.set_ylabel("recall")
    ax.set_ylim(0, 1.05)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)

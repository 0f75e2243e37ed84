"""Matplotlib figure rendering for the CLI report paths.

Figures are written next to the delimited outputs (CSV/JSONL) of each
command; everything renders through the Agg backend.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .data import ATTRIBUTE_NAMES


def plot_loss_trace(trace, path):
    """Per-epoch loss components from a training trace."""
    fig, ax = plt.subplots(figsize=(7, 4))
    epochs = [row["epoch"] for row in trace]
    for key in sorted({k for row in trace for k in row} - {"epoch", "lr"}):
        ax.plot(epochs, [row.get(key, np.nan) for row in trace], label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_per_class_ap(report, path):
    names = sorted(report.per_class_ap)
    vals = [report.per_class_ap[n] for n in names]
    fig, ax = plt.subplots(figsize=(max(4, 0.8 * len(names) + 2), 4))
    ax.bar(range(len(names)), vals, color="#4878a8")
    ax.axhline(report.map50, color="k", ls="--", lw=1,
               label=f"mAP@50 = {report.map50:.3f}")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("AP@50")
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_attribute_f1(report, path):
    vals = [report.attribute_f1.get(n, 0.0) for n in ATTRIBUTE_NAMES]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(range(len(ATTRIBUTE_NAMES)), vals, color="#6a9955")
    ax.set_xticks(range(len(ATTRIBUTE_NAMES)))
    ax.set_xticklabels(ATTRIBUTE_NAMES, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("F1")
    ax.set_ylim(0, 1.05)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_ablation(table, path):
    rows = [r["row"] for r in table]
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(x - 0.2, [r["map50_mean"] for r in table], 0.4,
           yerr=[r["map50_std"] for r in table], capsize=4,
           label="mAP@50", color="#4878a8")
    ax.bar(x + 0.2, [r["map50_95_mean"] for r in table], 0.4,
           yerr=[r["map50_95_std"] for r in table], capsize=4,
           label="mAP@50-95", color="#b46a55")
    ax.set_xticks(x)
    ax.set_xticklabels(rows)
    ax.set_ylabel("mAP")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_film_summary(class_counts, class_names, attr_rates, path):
    """Class count bars and attribute positive-rate bars, side by side."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(11, 4))
    ax1.bar(range(len(class_names)), [class_counts.get(i, 0) for i in range(len(class_names))],
            color="#4878a8")
    ax1.set_xticks(range(len(class_names)))
    ax1.set_xticklabels(class_names, rotation=45, ha="right", fontsize=8)
    ax1.set_ylabel("detections")
    ax1.set_title("cell types")
    ax2.bar(range(len(ATTRIBUTE_NAMES)),
            [attr_rates.get(n, 0.0) for n in ATTRIBUTE_NAMES], color="#6a9955")
    ax2.set_xticks(range(len(ATTRIBUTE_NAMES)))
    ax2.set_xticklabels(ATTRIBUTE_NAMES, rotation=45, ha="right", fontsize=8)
    ax2.set_ylabel("positive rate")
    ax2.set_ylim(0, 1.05)
    ax2.set_title("morphology")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)

"""Matplotlib figure emitters for the report paths (rendered to files)."""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def save_layer_scores(path: str, series: dict[str, list[tuple[str, float]]],
                      title: str, ylabel: str = "CCA similarity") -> str:
    """Line chart of per-layer scores; one line per named series."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for label, scores in series.items():
        names = [n for n, _ in scores]
        ax.plot(range(len(scores)), [s for _, s in scores], marker="o", label=label)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.set_ylim(0.0, 1.05)
    if len(series) > 1:
        ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def save_training_curves(metrics_csv: str, path: str) -> str:
    steps, loss, acc = [], [], []
    with open(metrics_csv, encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            steps.append(int(row["step"]))
            loss.append(float(row["loss"]))
            acc.append(float(row["masked_acc"]))
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3))
    ax1.plot(steps, loss)
    ax1.set_xlabel("step")
    ax1.set_ylabel("masked loss")
    ax1.grid(alpha=0.3)
    ax2.plot(steps, acc)
    ax2.set_xlabel("step")
    ax2.set_ylabel("masked accuracy")
    ax2.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def save_macs_bars(report, path: str) -> str:
    totals = report.group_totals()
    fig, ax = plt.subplots(figsize=(5, 3))
    names = list(totals)
    ax.bar(names, [totals[n] / 1e9 for n in names])
    ax.set_ylabel("GMACs / s")
    ax.set_title(report.name)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def save_layer_weights(weights, path: str, layer_labels=None) -> str:
    fig, ax = plt.subplots(figsize=(5, 3))
    xs = range(len(weights))
    ax.bar(xs, weights)
    if layer_labels:
        ax.set_xticks(list(xs))
        ax.set_xticklabels(layer_labels, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("layer weight")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path

"""Figures written next to the CSV/JSONL outputs of each command."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_training(records, path, title: str = "") -> Path:
    """Train and validation loss against step from metric records."""
    fig, ax = plt.subplots(figsize=(6, 4))
    train = [(r["step"], r["train_loss"]) for r in records if r.get("train_loss") is not None]
    val = [(r["step"], r["val_loss"]) for r in records if r.get("val_loss") is not None]
    if train:
        ax.plot(*zip(*train), lw=0.8, label="train")
    if val:
        ax.plot(*zip(*val), marker="o", ms=3, label="validation")
    ax.set_xlabel("step")
    ax.set_ylabel("loss (nats)")
    ax.set_title(title)
    ax.legend()
    return _save(fig, path)


def plot_overfit(curves: dict, threshold: float, path) -> Path:
    """Loss curves per optimizer on the fixed batch, log scale."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, losses in curves.items():
        ax.plot(range(len(losses)), losses, lw=1, label=label)
    ax.axhline(threshold, color="k", ls="--", lw=0.8)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss on the fixed batch (nats)")
    ax.legend()
    return _save(fig, path)


def plot_sweep(epsilons, series: dict, path) -> Path:
    """Smoothed Ackley value at the origin against epsilon, one line per probe family."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for label, values in series.items():
        ax.plot(epsilons, values, marker="o", label=label)
    ax.set_xlabel("epsilon")
    ax.set_ylabel("smoothed loss at 0")
    ax.legend()
    return _save(fig, path)


def plot_memory(rows, path) -> Path:
    """Measured peak bytes against context length per optimizer."""
    fig, ax = plt.subplots(figsize=(5, 4))
    by_opt: dict[str, list] = {}
    for r in rows:
        by_opt.setdefault(r["optimizer"], []).append((r["seq_len"], r["measured_peak_bytes"]))
    for opt, pts in by_opt.items():
        pts.sort()
        ax.plot(*zip(*pts), marker="o", label=opt)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("context length")
    ax.set_ylabel("peak allocation (bytes)")
    ax.legend()
    return _save(fig, path)

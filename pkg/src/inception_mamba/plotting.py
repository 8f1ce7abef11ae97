"""PNG figures written next to the CSV reports."""
from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.ticker import MaxNLocator  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_training_curves(path, logs: Sequence[tuple[str, Sequence[dict]]]) -> Path:
    """Loss and validation Dice per epoch, one line per labelled run."""
    fig, (ax_loss, ax_dice) = plt.subplots(1, 2, figsize=(9, 3.5))
    for label, rows in logs:
        epochs = [r["epoch"] for r in rows]
        ax_loss.plot(epochs, [r["train_loss"] for r in rows], marker=".", label=label)
        dice = [r["val_dice"] for r in rows]
        if not all(isinstance(d, float) and math.isnan(d) for d in dice):
            ax_dice.plot(epochs, dice, marker=".", label=label)
    ax_loss.set(xlabel="epoch", ylabel="train loss", yscale="log")
    ax_dice.set(xlabel="epoch", ylabel="val Dice", ylim=(0, 1.01))
    for ax in (ax_loss, ax_dice):
        ax.xaxis.set_major_locator(MaxNLocator(integer=True))
    if len(logs) > 1:
        ax_loss.legend(fontsize="small")
    return _save(fig, path)


def plot_dice_histogram(path, dice: Sequence[float]) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.hist(list(dice), bins=20, range=(0, 1), color="tab:blue", edgecolor="white")
    ax.set(xlabel="per-sample Dice", ylabel="samples")
    return _save(fig, path)


def plot_position_sweep(path, rows: Sequence[dict]) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    names = [r["position"] for r in rows]
    values = [r["val_dice"] for r in rows]
    bars = ax.bar(names, values, color="tab:green")
    for bar, r in zip(bars, rows):
        ax.annotate(f"#{r['rank']}", (bar.get_x() + bar.get_width() / 2, bar.get_height()),
                    ha="center", va="bottom", fontsize="small")
    lo = min(values) if values else 0.0
    ax.set(xlabel="decoder IMM position", ylabel="val Dice", ylim=(max(0.0, lo - 0.05), 1.0))
    return _save(fig, path)

"""Figures written next to the metrics logs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "figure.dpi": 110,
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_training_curves(records: Sequence, path) -> Path:
    """Loss components and training accuracy per epoch."""
    epochs = [r.epoch for r in records]
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.4))
        ax_loss.plot(epochs, [r.loss_total for r in records], label="total", color="k")
        ax_loss.plot(epochs, [r.loss_ce for r in records], label="ce", ls="--")
        wfc = np.array([r.loss_wfc for r in records], dtype=float)
        sep = np.array([r.loss_sep for r in records], dtype=float)
        if np.isfinite(wfc).any():
            ax_loss.plot(epochs, wfc, label="wfc", ls=":")
        if np.isfinite(sep).any():
            ax_loss.plot(epochs, sep, label="sep", ls="-.")
        ax_loss.set_xlabel("epoch")
        ax_loss.set_ylabel("loss")
        ax_loss.legend(frameon=False)
        ax_acc.plot(epochs, [100 * r.natural_accuracy for r in records], color="C2", label="train")
        test = [r.extra.get("test_natural_accuracy") for r in records]
        if all(t is not None for t in test):
            ax_acc.plot(epochs, [100 * t for t in test], color="C3", label="test")
            ax_acc.legend(frameon=False)
        ax_acc.set_xlabel("epoch")
        ax_acc.set_ylabel("natural accuracy (%)")
        return _save(fig, path)


def plot_ablation(records: Sequence, path) -> Path:
    """Grouped bars: one group per loss configuration, one bar per metric."""
    metrics = ["natural"]
    for r in records:
        metrics += [k for k in r.robust_accuracy if k not in metrics]
    tags = [r.tag for r in records]
    width = 0.8 / len(metrics)
    x = np.arange(len(tags))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.6 * len(tags) + 2, 3.6))
        for i, name in enumerate(metrics):
            vals = [100 * (r.natural_accuracy if name == "natural" else r.robust_accuracy.get(name, np.nan))
                    for r in records]
            ax.bar(x + (i - (len(metrics) - 1) / 2) * width, vals, width, label=name)
        ax.set_xticks(x)
        ax.set_xticklabels(tags)
        ax.set_ylabel("accuracy (%)")
        ax.set_ylim(0, 100)
        ax.legend(frameon=False, ncol=len(metrics), loc="lower center", bbox_to_anchor=(0.5, 1.0))
        return _save(fig, path)


def plot_angle_histogram(clean, adv, path, bins: int = 40) -> Path:
    """Distribution of true-class angles before and after the attack."""
    clean = np.degrees(np.asarray(clean))
    adv = np.degrees(np.asarray(adv))
    edges = np.linspace(0.0, max(clean.max(), adv.max(), 1.0), bins + 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.4))
        ax.hist(clean, edges, alpha=0.6, label=f"clean (mean {clean.mean():.1f})")
        ax.hist(adv, edges, alpha=0.6, label=f"attacked (mean {adv.mean():.1f})")
        ax.set_xlabel("angle to true-class weight (deg)")
        ax.set_ylabel("count")
        ax.legend(frameon=False)
        return _save(fig, path)

"""Figures written next to the CSV outputs."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _style(ax):
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    ax.grid(alpha=0.3, linewidth=0.5)


def plot_training_curves(rows, path: str | Path, title: str = "") -> Path:
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.4))
    for split, color in (("train", "C0"), ("test", "C1")):
        sel = [r for r in rows if r.split == split]
        if not sel:
            continue
        ep = [r.epoch for r in sel]
        ax_loss.plot(ep, [r.loss for r in sel], color=color, label=split)
        ax_acc.plot(ep, [r.top1 for r in sel], color=color, label=split)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("cross-entropy")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("top-1")
    ax_acc.set_ylim(0, 1.02)
    for ax in (ax_loss, ax_acc):
        _style(ax)
    ax_acc.legend(frameon=False)
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_bench(rows, path: str | Path, slope: float | None = None) -> Path:
    px = np.array([r["pixels"] for r in rows], dtype=float)
    t = np.array([r["median_seconds"] for r in rows], dtype=float)
    err = np.array([r["std_seconds"] for r in rows], dtype=float)
    fig, ax = plt.subplots(figsize=(4.5, 3.4))
    ax.errorbar(px, t * 1e3, yerr=err * 1e3, fmt="o-", capsize=3)
    if slope is not None:
        xs = np.linspace(0, px.max(), 50)
        ax.plot(xs, slope * xs * 1e3 + (t[0] - slope * px[0]) * 1e3, "--", color="grey",
                linewidth=0.8, label="linear fit")
        ax.legend(frameon=False)
    ax.set_xlabel("pixels per image")
    ax.set_ylabel("forward time [ms]")
    _style(ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)

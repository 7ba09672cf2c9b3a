"""Matplotlib figure rendering for reports and prior-mask probes.

All figures go to files (Agg backend); nothing here opens a window.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def save_miou_bars(fold_mious: dict[int, float], out_path, title: str = "mIoU per fold") -> Path:
    """Bar chart of per-fold mIoU plus a Mean bar."""
    out_path = Path(out_path)
    folds = sorted(fold_mious)
    values = [fold_mious[f] for f in folds]
    mean = sum(values) / len(values)
    labels = [f"Fold-{f}" for f in folds] + ["Mean"]
    heights = values + [mean]

    fig, ax = plt.subplots(figsize=(1.2 * len(labels) + 2, 3.2))
    colors = ["#4878cf"] * len(values) + ["#d65f5f"]
    ax.bar(labels, heights, color=colors)
    ax.set_ylim(0, 1)
    ax.set_ylabel("mIoU")
    ax.set_title(title)
    for i, h in enumerate(heights):
        ax.text(i, h + 0.02, f"{h:.3f}", ha="center", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def save_heatmap(values, out_path, title: str = "", vmin: float = 0.0,
                 vmax: float = 1.0) -> Path:
    """Render a [H, W] map (e.g. a prior mask) as a colormapped PNG."""
    out_path = Path(out_path)
    arr = np.asarray(values, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(4, 3.4))
    im = ax.imshow(arr, cmap="viridis", vmin=vmin, vmax=vmax)
    ax.set_xticks([])
    ax.set_yticks([])
    if title:
        ax.set_title(title, fontsize=9)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path

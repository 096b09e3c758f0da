"""Figures written next to the CLI's text outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

DPI = 110


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def training_curves(history: Sequence, path, title: str = ""):
    """Loss and validation mIoU per epoch."""
    epochs = [r.epoch for r in history]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(epochs, [r.mean_loss for r in history], color="tab:blue", marker=".", label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean BCE loss", color="tab:blue")
    val = [(r.epoch, r.val_miou) for r in history if r.val_miou is not None]
    if val:
        ax2 = ax.twinx()
        ax2.plot(*zip(*val), color="tab:red", marker="o", label="val mIoU")
        ax2.set_ylabel("val mIoU", color="tab:red")
        ax2.set_ylim(0, 1)
    if title:
        ax.set_title(title)
    return _save(fig, path)


def iou_histogram(report, path, bins: int = 20):
    values = [v for _, v in report.records]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.hist(values, bins=bins, range=(0, 1), color="tab:green", edgecolor="black")
    ax.axvline(report.miou, color="black", linestyle="--", label=f"mIoU {report.miou:.3f}")
    ax.set_xlabel("per-image IoU")
    ax.set_ylabel("images")
    ax.legend(loc="upper left")
    return _save(fig, path)


def correction_panel(original: np.ndarray, corrected: np.ndarray, path):
    """Side-by-side original / corrected (both (3,H,W), 0..255)."""
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.5))
    for ax, img, label in zip(axes, (original, corrected), ("original", "corrected")):
        ax.imshow(np.clip(img, 0, 255).astype(np.uint8).transpose(1, 2, 0))
        ax.set_title(label)
        ax.axis("off")
    return _save(fig, path)

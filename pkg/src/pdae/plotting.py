"""Report figures and image grids.

Every CLI report writes its delimited output (CSV) and a rendered figure
side by side; these helpers own the rendering. Figures go through the Agg
backend so they work headless.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from PIL import Image

from .schedule import NoiseSchedule, WeightKind, WeightScheme, loss_weight


def to_uint8(images: np.ndarray) -> np.ndarray:
    """[N,C,H,W] in [-1,1] -> [N,H,W] or [N,H,W,3] uint8."""
    arr = np.clip((np.asarray(images) + 1.0) / 2.0, 0.0, 1.0)
    arr = (arr * 255.0 + 0.5).astype(np.uint8)
    if arr.shape[1] == 1:
        return arr[:, 0]
    return arr.transpose(0, 2, 3, 1)


def image_grid(images: np.ndarray, n_cols: int, pad: int = 1) -> np.ndarray:
    """Tile [N,C,H,W] images into one uint8 mosaic, row-major."""
    tiles = to_uint8(images)
    n = len(tiles)
    n_cols = max(1, min(n_cols, n))
    n_rows = (n + n_cols - 1) // n_cols
    h, w = tiles.shape[1], tiles.shape[2]
    extra = tiles.shape[3:]  # () for grayscale, (3,) for rgb
    grid = np.full(
        (n_rows * (h + pad) - pad, n_cols * (w + pad) - pad) + extra, 255, np.uint8
    )
    for i, tile in enumerate(tiles):
        r, c = divmod(i, n_cols)
        grid[r * (h + pad) : r * (h + pad) + h, c * (w + pad) : c * (w + pad) + w] = tile
    return grid


def save_image_grid(images: np.ndarray, path: str | Path, n_cols: int = 8) -> None:
    Image.fromarray(image_grid(images, n_cols)).save(path)


def save_weighting_figure(sched: NoiseSchedule, path: str | Path, gamma: float = 0.1):
    ts = np.arange(1, sched.T + 1)
    pdae = WeightScheme(WeightKind.PDAE, gamma)
    w = np.array([loss_weight(pdae, sched, int(t)) for t in ts])
    snr = np.array([sched.snr(int(t)) for t in ts])
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    axes[0].plot(ts, w / w.max(), label=f"gap weighting (gamma={gamma})")
    axes[0].plot(ts, np.ones_like(ts, dtype=float), "--", label="simple")
    axes[0].set_xlabel("t")
    axes[0].set_ylabel("weight (max-normalized)")
    axes[0].legend(fontsize=8)
    axes[1].semilogx(snr, w / w.max())
    axes[1].set_xlabel("SNR(t)")
    axes[1].set_ylabel("weight (max-normalized)")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_gap_figure(curve, path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    ax.plot(curve.ts, curve.gap_pretrained, label="pretrained")
    ax.plot(curve.ts, curve.gap_shifted, label="with predicted shift")
    ax.set_xlabel("t")
    ax.set_ylabel("average squared posterior mean gap")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_loss_curves_figure(
    path: str | Path, curves: dict, xlabel: str = "images seen"
) -> None:
    """curves: name -> (x array, y array)."""
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    for name, (x, y) in curves.items():
        ax.plot(x, y, label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("evaluation loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_stage_table_figure(table, T: int, stride: int, path: str | Path) -> None:
    """Accuracy heatmap over (t1, t2) pairs from the stage grid search."""
    grid_vals = sorted({t1 for (t1, _), _ in table} | {t2 for (_, t2), _ in table})
    index = {v: i for i, v in enumerate(grid_vals)}
    mat = np.full((len(grid_vals), len(grid_vals)), np.nan)
    for (t1, t2), acc in table:
        mat[index[t1], index[t2]] = acc
    fig, ax = plt.subplots(figsize=(5, 4.2))
    im = ax.imshow(mat, origin="lower", vmin=0, vmax=1, cmap="viridis")
    ax.set_xticks(range(len(grid_vals)))
    ax.set_xticklabels(grid_vals, rotation=90, fontsize=6)
    ax.set_yticks(range(len(grid_vals)))
    ax.set_yticklabels(grid_vals, fontsize=6)
    ax.set_xlabel("t2")
    ax.set_ylabel("t1")
    fig.colorbar(im, ax=ax, label="class accuracy")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_one_step_figure(grid, path: str | Path) -> None:
    """Mosaic: input images, then per-t one-step reconstructions for the
    pretrained model and for the shifted model."""
    rows = [grid.x0]
    for k in range(len(grid.ts)):
        rows.append(grid.pretrained[k])
    for k in range(len(grid.ts)):
        rows.append(grid.shifted[k])
    stack = np.concatenate(rows, axis=0)
    save_image_grid(stack, path, n_cols=len(grid.x0))

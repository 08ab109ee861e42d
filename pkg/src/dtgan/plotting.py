"""Figures for reports: pixel-exact image grids and matplotlib charts."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

from .datagen import to_uint8  # noqa: E402

# Fixed metadata keeps PNG bytes stable across reruns.
_PNG_META = {"Software": None}


def image_grid(images, cols: int, pad: int = 0, pad_value: int = 255) -> np.ndarray:
    """Tile ``(n, 3, H, W)`` images in [-1, 1] into one uint8 HWC array."""
    arr = [to_uint8(np.asarray(im)) for im in images]
    if not arr:
        raise ValueError("image_grid needs at least one image")
    cols = max(1, min(cols, len(arr)))
    rows = -(-len(arr) // cols)
    h, w = arr[0].shape[:2]
    out = np.full((rows * h + (rows - 1) * pad, cols * w + (cols - 1) * pad, 3), pad_value, np.uint8)
    for i, im in enumerate(arr):
        r, c = divmod(i, cols)
        out[r * (h + pad): r * (h + pad) + h, c * (w + pad): c * (w + pad) + w] = im
    return out


def save_grid(images, path: str | Path, cols: int, scale: int = 1, pad: int = 0) -> Path:
    grid = image_grid(images, cols, pad)
    if scale > 1:
        grid = grid.repeat(scale, 0).repeat(scale, 1)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(grid).save(path)
    return path


def save_nn_audit(generated, train, nearest: Sequence[int], path: str | Path, max_rows: int = 16,
                  scale: int = 2) -> Path:
    """Side-by-side pairs: each generated sample next to its nearest train image."""
    k = min(max_rows, len(generated))
    pairs = []
    for i in range(k):
        pairs.extend([generated[i], train[int(nearest[i])]])
    return save_grid(pairs, path, cols=2, scale=scale)


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_loss_curves(csv_path: str | Path, png_path: str | Path,
                     terms: Sequence[str] = ("adv_d", "adv_g", "sd_rec", "d_rec", "cyc",
                                             "fg_cls_real", "bg_cls_real")) -> Path:
    with open(csv_path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{csv_path}: empty training log")
    steps = np.array([int(r["step"]) for r in rows])
    fig, ax = plt.subplots(figsize=(7, 4))
    for t in terms:
        if t in rows[0]:
            ax.plot(steps, [float(r[t]) for r in rows], label=t, lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("symlog", linthresh=1e-2)
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    return _save(fig, png_path)


def plot_error_rates(results: Mapping[str, Sequence[float]], png_path: str | Path,
                     title: str = "test error") -> Path:
    names = list(results)
    means = [float(np.mean(results[n])) for n in names]
    stds = [float(np.std(results[n])) for n in names]
    fig, ax = plt.subplots(figsize=(1.6 * len(names) + 2, 3.5))
    ax.bar(range(len(names)), means, yerr=stds, capsize=4, color="#6a8caf")
    ax.set_xticks(range(len(names)), names)
    ax.set_ylabel("error rate")
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, png_path)


def plot_metric_bars(values: Mapping[str, float], png_path: str | Path, title: str) -> Path:
    names = list(values)
    fig, ax = plt.subplots(figsize=(1.4 * len(names) + 2, 3.2))
    ax.bar(range(len(names)), [values[n] for n in names], color="#af8c6a")
    ax.set_xticks(range(len(names)), names)
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, png_path)

"""Deterministic PNG renderings of results and matrix files."""
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import DataError  # noqa: E402
from .metrics import iou_vs_area_curve  # noqa: E402

_SAVE = {"format": "png", "dpi": 100, "metadata": {"Software": None}}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return path


def plot_area_curves(path, curves, bins=10):
    """One IoU-vs-mask-area curve per label; ``curves`` maps label -> per-sample results."""
    if not curves:
        raise DataError("nothing to plot")
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, per_sample in curves.items():
        if not per_sample:
            raise DataError(f"results for {label!r} are empty")
        points = [b for b in iou_vs_area_curve(per_sample, bins) if b["count"]]
        xs = [(b["lo"] + b["hi"]) / 2 for b in points]
        ax.plot(xs, [b["mean_iou"] for b in points], marker="o", label=label)
    ax.set_xlabel("manipulated area (%)")
    ax.set_ylabel("IoU (%)")
    ax.set_ylim(0, 100)
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_matrix(path, matrix, row_names, col_names):
    matrix = np.asarray(matrix, dtype=float)
    fig, ax = plt.subplots(figsize=(1.2 * len(col_names) + 2.5, 0.6 * len(row_names) + 1.8))
    ax.imshow(matrix, vmin=0, vmax=100, cmap="viridis")
    ax.set_xticks(range(len(col_names)), col_names, rotation=30, ha="right")
    ax.set_yticks(range(len(row_names)), row_names)
    ax.set_xlabel("test")
    ax.set_ylabel("train")
    for i in range(matrix.shape[0]):
        for j in range(matrix.shape[1]):
            ax.text(j, i, f"{matrix[i, j]:.1f}", ha="center", va="center",
                    color="white" if matrix[i, j] < 50 else "black")
    fig.tight_layout()
    return _save(fig, path)

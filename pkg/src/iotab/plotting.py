"""Report figures: error heatmaps, error-rate histogram, training curves.

Uses the non-interactive Agg backend; every function writes a file and
closes its figure.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import LogNorm  # noqa: E402

from .metrics import DiffHeatmaps, Histogram  # noqa: E402

STYLE = {
    "font.size": 8,
    "axes.labelsize": 8,
    "xtick.labelsize": 6,
    "ytick.labelsize": 6,
    "figure.dpi": 100,
    "svg.hashsalt": "iotab",  # stable ids so reruns give identical files
}


def _heatmap(grid, rows, cols, title, path, log_scale):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(0.28 * len(cols) + 1.8, 0.28 * len(rows) + 1.0))
        data = np.ma.masked_invalid(grid)
        norm = None
        if log_scale:
            pos = data.compressed()
            pos = pos[pos > 0]
            if pos.size:
                norm = LogNorm(vmin=pos.min(), vmax=pos.max())
                data = np.ma.masked_where(np.ma.filled(data, 0) <= 0, data)
        im = ax.imshow(data, cmap="viridis", norm=norm, aspect="auto")
        ax.set_xticks(range(len(cols)), cols, rotation=90)
        ax.set_yticks(range(len(rows)), rows)
        ax.set_title(title)
        fig.colorbar(im, ax=ax)
        fig.tight_layout()
        fig.savefig(path, metadata={"Date": None} if str(path).endswith(".svg") else None)
        plt.close(fig)


def plot_heatmaps(hm: DiffHeatmaps, out_dir, fmt: str = "svg") -> list[Path]:
    """Absolute errors on a log colour scale and error rates in percent;
    absent cells are left blank."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / f"heatmap_abs.{fmt}", out / f"heatmap_rate.{fmt}"]
    _heatmap(hm.abs_diff, hm.row_labels, hm.col_labels, "Absolute error", paths[0], log_scale=True)
    _heatmap(hm.rate, hm.row_labels, hm.col_labels, "Error rate (%)", paths[1], log_scale=False)
    return paths


def plot_histogram(hist: Histogram, path) -> Path:
    labels = [b[0] for b in hist.bins()]
    counts = [b[3] for b in hist.bins()]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3))
        ax.bar(range(len(counts)), counts, color="0.4")
        ax.set_xticks(range(len(labels)), labels, rotation=60)
        ax.set_xlabel("error rate (%)")
        ax.set_ylabel("items")
        fig.tight_layout()
        fig.savefig(path, metadata={"Date": None} if str(path).endswith(".svg") else None)
        plt.close(fig)
    return Path(path)


def plot_history(history, path, title="") -> Path:
    h = np.asarray(history)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot(np.arange(1, len(h) + 1), h[:, 0], label="train")
        ax.plot(np.arange(1, len(h) + 1), h[:, 1], label="validation")
        ax.set_yscale("log")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        if title:
            ax.set_title(title)
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path, metadata={"Date": None} if str(path).endswith(".svg") else None)
        plt.close(fig)
    return Path(path)

"""Report figures, rendered off-screen to PNG files."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .report import DIGITS, HEADERS, StratifiedReport  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    # fixed metadata keeps reruns byte-identical
    "svg.hashsalt": "progdit",
}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def loss_curve(steps: Sequence[int], losses: Sequence[float], path: str | Path, window: int = 50) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot(steps, losses, lw=0.6, alpha=0.4, label="loss")
        if len(losses) >= window:
            k = np.ones(window) / window
            ax.plot(steps[window - 1:], np.convolve(losses, k, mode="valid"), lw=1.4, label=f"mean of {window}")
        ax.set_xlabel("step")
        ax.set_ylabel("v-prediction MSE")
        ax.set_yscale("log")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def metric_bars(report: StratifiedReport, metric: str, path: str | Path) -> Path:
    rows = [r for r in report.rows if r.cells[metric].n > 0]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        x = np.arange(len(rows))
        ax.bar(x, [r.cells[metric].mean for r in rows], yerr=[r.cells[metric].sd for r in rows],
               color="0.6", edgecolor="0.2", capsize=3)
        ax.set_xticks(x, [r.label for r in rows], rotation=20)
        ax.set_ylabel(HEADERS[metric])
        ax.set_title(report.title)
        for xi, r in zip(x, rows):
            ax.annotate(f"{r.cells[metric].mean:.{DIGITS[metric]}f}", (xi, r.cells[metric].mean),
                        ha="center", va="bottom", fontsize=7, xytext=(0, 2), textcoords="offset points")
        fig.tight_layout()
        return _save(fig, path)


def example_grid(examples: Sequence[tuple[str, np.ndarray, np.ndarray, np.ndarray]], path: str | Path) -> Path:
    """Rows of (baseline, target, generated, |generated - target|)."""
    n = max(1, len(examples))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(n, 4, figsize=(6.4, 1.7 * n), squeeze=False)
        titles = ("baseline", "target", "generated", "abs error")
        for i, (label, base, tgt, gen) in enumerate(examples):
            for j, img in enumerate((base, tgt, gen, np.abs(gen - tgt))):
                ax = axes[i, j]
                ax.imshow(img, cmap="gray" if j < 3 else "magma", vmin=0, vmax=1 if j < 3 else 0.3)
                ax.set_xticks([])
                ax.set_yticks([])
                if i == 0:
                    ax.set_title(titles[j])
            axes[i, 0].set_ylabel(label, fontsize=6)
        fig.tight_layout()
        return _save(fig, path)


def interval_sweep(intervals: Sequence[float], images: np.ndarray, areas: Sequence[int],
                   path: str | Path) -> Path:
    k = len(intervals)
    with plt.rc_context(STYLE):
        fig = plt.figure(figsize=(1.5 * k, 3.2))
        grid = fig.add_gridspec(2, k, height_ratios=(1, 0.8))
        for i in range(k):
            ax = fig.add_subplot(grid[0, i])
            ax.imshow(images[i], cmap="gray", vmin=0, vmax=1)
            ax.set_xticks([])
            ax.set_yticks([])
            ax.set_title(f"{intervals[i]:g} mo")
        ax = fig.add_subplot(grid[1, :])
        ax.plot(intervals, areas, "o-", color="0.2")
        ax.set_xlabel("interval (months)")
        ax.set_ylabel("ventricle px")
        fig.tight_layout()
        return _save(fig, path)

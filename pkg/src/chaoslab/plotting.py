"""Report figures, one per study, written with the non-interactive Agg backend."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.5, 3.8),
    "figure.dpi": 110,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "savefig.bbox": "tight",
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def loglog_series(path, series: dict[str, tuple[Sequence[float], Sequence[float]]], xlabel: str, ylabel: str,
                  title: str = "", bands: dict[str, tuple[Sequence[float], Sequence[float]]] | None = None,
                  reference: tuple[Sequence[float], Sequence[float], str] | None = None) -> Path:
    """Log-log lines with optional shaded CI bands and a dashed reference line."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label, (x, y) in series.items():
            ax.loglog(x, y, "o-", ms=4, label=label)
            if bands and label in bands:
                lo, hi = bands[label]
                ax.fill_between(x, np.maximum(lo, 1e-300), hi, alpha=0.2)
        if reference is not None:
            x, y, label = reference
            ax.loglog(x, y, "k--", lw=1, label=label)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        ax.legend()
        return _save(fig, path)


def trajectories(path, times: np.ndarray, snapshots: np.ndarray, n_show: int = 20, title: str = "") -> Path:
    """First coordinate of a few particles from run 0, plus the terminal histogram."""
    with plt.rc_context(STYLE):
        fig, (ax, axh) = plt.subplots(1, 2, figsize=(8, 3.6), gridspec_kw={"width_ratios": [3, 1]}, sharey=True)
        x = snapshots[:, 0, :n_show, 0]
        ax.plot(times, x, lw=0.7)
        ax.set_xlabel("t")
        ax.set_ylabel("x (first coordinate)")
        axh.hist(snapshots[-1, :, :, 0].ravel(), bins=40, orientation="horizontal", density=True, alpha=0.7)
        axh.set_xlabel("density at T")
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def densities(path, curves: dict[str, tuple[np.ndarray, np.ndarray]], title: str = "") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label, (x, y) in curves.items():
            ax.plot(x, y, lw=1.2, label=label)
        ax.set_xlabel("x")
        ax.set_ylabel("density")
        if title:
            ax.set_title(title)
        ax.legend(fontsize=7)
        return _save(fig, path)


def bars(path, labels: Sequence[str], values: Sequence[float], ylabel: str, title: str = "") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.bar(range(len(values)), values)
        ax.set_xticks(range(len(values)), labels, rotation=30, ha="right")
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        return _save(fig, path)

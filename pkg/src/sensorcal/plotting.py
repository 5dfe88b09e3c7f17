"""Figures for the ``report`` command. Files only, no display."""

from __future__ import annotations

from contextlib import contextmanager
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import TABLES, PairwiseReport  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
    # fixed metadata keeps re-rendered files comparable
    "svg.hashsalt": "sensorcal",
}


@contextmanager
def style(updates=None):
    with matplotlib.rc_context({**STYLE, **(updates or {})}):
        yield


def size(scale: float = 1.0, ratio: float = 0.62) -> tuple[float, float]:
    width = 6.3 * scale  # inches, roughly a text column
    return width, width * ratio


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def pairwise_bars(report: PairwiseReport, path) -> Path:
    """One panel per table, one bar per sensor pair, dashed line at the average."""
    with style():
        fig, axes = plt.subplots(1, len(TABLES), figsize=size(1.6, 0.3))
        for ax, (name, _, _, unit) in zip(axes, TABLES):
            rows = report.table(name)
            labels = [f"{r.src}\n{r.dst}" for r in rows]
            vals = [r.rms if r.rms is not None else 0.0 for r in rows]
            bars = ax.bar(range(len(rows)), vals, color="0.45")
            for b, r in zip(bars, rows):
                if r.rms is None:
                    b.set_hatch("//")
                    b.set_facecolor("none")
            avg = report.averages[name]
            if avg is not None:
                ax.axhline(avg, ls="--", lw=0.8, color="C3")
            ax.set_xticks(range(len(rows)))
            ax.set_xticklabels(labels, rotation=90, fontsize=6)
            ax.set_title(name)
            ax.set_ylabel("RMS (mm)" if unit == "millimeters" else "RMS (px)")
        fig.tight_layout()
        return _save(fig, Path(path))


def distance_histograms(raw: dict, path, bins: int = 40) -> Path:
    """Per-table histogram of the per-point distances behind the RMS values."""
    with style():
        fig, axes = plt.subplots(1, len(TABLES), figsize=size(1.6, 0.25))
        for ax, (name, _, _, unit) in zip(axes, TABLES):
            parts = [d for (t, _, _), d in sorted(raw.items()) if t == name and len(d)]
            if parts:
                ax.hist(np.concatenate(parts), bins=bins, color="0.45")
            else:
                ax.text(0.5, 0.5, "not evaluable", ha="center", va="center", transform=ax.transAxes)
            ax.set_title(name)
            ax.set_xlabel("mm" if unit == "millimeters" else "px")
        fig.tight_layout()
        return _save(fig, Path(path))


def cost_history(history, path) -> Path:
    h = np.asarray(history, dtype=float)
    with style():
        fig, ax = plt.subplots(figsize=size(0.6, 0.7))
        ax.semilogy(np.arange(len(h)), np.maximum(h, np.finfo(float).tiny), marker="o", ms=3, color="k")
        ax.set_xlabel("accepted iteration")
        ax.set_ylabel("cost")
        fig.tight_layout()
        return _save(fig, Path(path))

"""Static SVG line plots with reproducible bytes."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams["svg.hashsalt"] = "sncpd"
plt.rcParams["svg.fonttype"] = "none"


def _save(fig, path: str | Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_trace(trace, path: str | Path, labels=None, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(8, 3))
    ax.plot(trace.split_indices, trace.statistic, lw=0.8, label="statistic")
    if np.isfinite(trace.threshold):
        ax.axhline(trace.threshold, color="tab:red", lw=0.8, ls="--", label="threshold")
    for cp in ([] if labels is None else labels):
        ax.axvline(cp, color="k", lw=0.6, alpha=0.5)
    ax.set_xlabel("split index")
    ax.set_ylabel("statistic")
    ax.set_title(title)
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def plot_curve(x, y, path: str | Path, xlabel: str, ylabel: str, title: str = "",
               invert_x: bool = False, vline: float | None = None) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(x, y, marker=".", lw=1.0)
    if vline is not None:
        ax.axvline(vline, color="k", lw=0.6, ls=":")
    if invert_x:
        ax.invert_xaxis()
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)

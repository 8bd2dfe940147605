"""Matplotlib figures for tours, benchmark tables and training curves.

All functions draw with the non-interactive Agg backend and write straight to
a file; the format follows the file extension (``.svg``, ``.png``, ``.pdf``).
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .core import CVRP, CyclicSolution, Instance, solution_length  # noqa: E402

STYLE = {
    "font.size": 10,
    "axes.linewidth": 0.8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.bbox": "tight",
    "svg.hashsalt": "insert-nco",  # stable element ids -> reproducible SVG files
    "svg.fonttype": "none",
}

ROUTE_COLORS = plt.get_cmap("tab10").colors


def draw_solution(ax, instance: Instance, solution: CyclicSolution | None = None, title: str | None = None):
    xy = instance.coords
    if solution is not None:
        if instance.kind == CVRP:
            for k, r in enumerate(solution.routes()):
                path = xy[[0, *r, 0]]
                ax.plot(path[:, 0], path[:, 1], "-", lw=1.0, color=ROUTE_COLORS[k % len(ROUTE_COLORS)])
        else:
            path = xy[list(solution.order) + [solution.order[0]]]
            ax.plot(path[:, 0], path[:, 1], "-", lw=1.0, color="#34495e")
    if instance.kind == CVRP:
        ax.scatter(xy[1:, 0], xy[1:, 1], s=12, color="#3498db", zorder=3)
        ax.scatter(xy[:1, 0], xy[:1, 1], s=60, marker="s", color="#e74c3c", zorder=4, label="depot")
    else:
        ax.scatter(xy[:, 0], xy[:, 1], s=12, color="#3498db", zorder=3)
    ax.set_aspect("equal")
    ax.set_xticks([])
    ax.set_yticks([])
    if title is None and solution is not None:
        title = f"{instance.name}  length {solution_length(instance, solution):.4f}"
    if title:
        ax.set_title(title)
    return ax


def save_solution_figure(path, instance: Instance, solution: CyclicSolution | None = None, title: str | None = None) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 5))
        draw_solution(ax, instance, solution, title)
        fig.savefig(path, metadata=_metadata(path))
        plt.close(fig)
    return Path(path)


def save_gap_figure(path, rows: Sequence[dict]) -> Path:
    """Bar chart of the mean gap (%) per method from bench rows."""
    names = [r["method"] for r in rows]
    gaps = [float(r["gap_pct"]) for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(3.0, 0.8 * len(rows) + 1.5), 3.2))
        ax.bar(np.arange(len(rows)), gaps, color="#3498db")
        ax.set_xticks(np.arange(len(rows)), names, rotation=30, ha="right")
        ax.set_ylabel("gap to reference (%)")
        ax.axhline(0, color="black", lw=0.6)
        fig.savefig(path, metadata=_metadata(path))
        plt.close(fig)
    return Path(path)


def save_training_figure(path, log_csv) -> Path:
    """Per-epoch mean loss from a training CSV log."""
    with open(log_csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    epochs = [int(r["epoch"]) for r in rows]
    losses = [float(r["mean_loss"]) for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot(epochs, losses, "o-", ms=3)
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean loss")
        fig.savefig(path, metadata=_metadata(path))
        plt.close(fig)
    return Path(path)


def _metadata(path) -> dict:
    # drop creation dates so identical inputs give identical files
    suffix = Path(path).suffix.lower()
    if suffix == ".svg":
        return {"Date": None}
    if suffix == ".pdf":
        return {"CreationDate": None}
    return {}

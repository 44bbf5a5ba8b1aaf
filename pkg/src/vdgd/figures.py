"""Figure rendering for the CLI report paths.

Each analysis command writes its delimited output and, unless disabled, a
matplotlib PNG next to it. Library modules stay figure-free; everything
visual lives here. matplotlib is imported lazily so plain library use never
pays for it.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

from .dist import LogitStats
from .ranks import RankCurve

__all__ = ["save_rank_curve_figure", "save_stats_figure", "save_category_figure"]


def _pyplot():
    import matplotlib

    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt

    return plt


def save_rank_curve_figure(curve: RankCurve, path: str | Path, title: str = "Base rank by position") -> None:
    plt = _pyplot()
    rows = curve.rows()
    positions = [r[0] for r in rows]
    means = [r[1] for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(positions, means, marker="o", markersize=3, linewidth=1.2)
    ax.set_xlabel("response token position")
    ax.set_ylabel("mean base rank")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_stats_figure(
    clean: LogitStats | None, halluc: LogitStats | None, path: str | Path
) -> None:
    plt = _pyplot()
    labels = ["k", "variance", "range", "avg"]
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.38
    xs = range(len(labels))
    if clean is not None:
        ax.bar([x - width / 2 for x in xs], [clean.k, clean.variance, clean.range, clean.avg],
               width, label="clean")
    if halluc is not None:
        ax.bar([x + width / 2 for x in xs], [halluc.k, halluc.variance, halluc.range, halluc.avg],
               width, label="hallucinated")
    ax.set_xticks(list(xs), labels)
    ax.set_ylabel("value")
    ax.set_title("Post-truncation statistics")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_category_figure(counts: Mapping[str, int], path: str | Path, skipped: int = 0) -> None:
    plt = _pyplot()
    labels = list(counts.keys()) + (["Skipped"] if skipped else [])
    values = list(counts.values()) + ([skipped] if skipped else [])
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(labels, values)
    ax.set_ylabel("phrases")
    ax.set_title("Hallucination categories")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)

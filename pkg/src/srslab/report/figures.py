"""Matplotlib figures: seed-mean learning curves with t-interval bands, and
episodes-to-threshold bars."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure
from scipy import stats

from ..harness import AggregateResult, MetricsTimeline

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
}


def _new_figure(width: float = 6.0, height: float = 3.6) -> tuple[Figure, object]:
    fig = Figure(figsize=(width, height), dpi=120)
    FigureCanvasAgg(fig)
    ax = fig.add_subplot(1, 1, 1)
    return fig, ax


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    # no Software/date chunks, so equal inputs give equal bytes
    fig.savefig(path, format="png", metadata={"Software": None})
    return path


def curve_band(timelines: Sequence[MetricsTimeline], confidence: float = 0.95):
    """Episodes, seed-mean scores and t-interval half-widths over the shared prefix."""
    usable = [t for t in timelines if t.scores]
    n = min(len(t.scores) for t in usable)
    scores = np.array([t.scores[:n] for t in usable])
    mean = scores.mean(axis=0)
    if len(usable) > 1:
        sem = scores.std(axis=0, ddof=1) / np.sqrt(len(usable))
        half = stats.t.ppf(0.5 + confidence / 2, len(usable) - 1) * sem
    else:
        half = np.zeros(n)
    return np.asarray(usable[0].episodes[:n]), mean, half


def learning_curves_png(groups: Mapping[str, Sequence[MetricsTimeline]], path, threshold: Optional[float] = None,
                        title: str = "") -> Path:
    import matplotlib as mpl

    with mpl.rc_context(STYLE):
        fig, ax = _new_figure()
        for name, timelines in groups.items():
            if not any(t.scores for t in timelines):
                continue
            x, mean, half = curve_band(timelines)
            line, = ax.plot(x, mean, lw=1.2, label=name)
            ax.fill_between(x, mean - half, mean + half, color=line.get_color(), alpha=0.2, lw=0)
        if threshold is not None:
            ax.axhline(threshold, color="0.4", ls="--", lw=0.8, label="threshold")
        ax.set_xlabel("training episodes")
        ax.set_ylabel("evaluation score")
        if title:
            ax.set_title(title)
        ax.legend(loc="lower right", frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def efficiency_png(aggregates: Mapping[str, AggregateResult], path, title: str = "") -> Path:
    """Mean episodes-to-threshold per variant with CI whiskers; attain counts annotated."""
    import matplotlib as mpl

    names = list(aggregates)
    means = [aggregates[n].mean for n in names]
    halves = [aggregates[n].half_width for n in names]
    heights = [0.0 if np.isnan(m) else m for m in means]
    errs = [0.0 if np.isnan(h) else h for h in halves]
    with mpl.rc_context(STYLE):
        fig, ax = _new_figure(width=max(4.0, 1.1 * len(names) + 1.5))
        pos = np.arange(len(names))
        ax.bar(pos, heights, yerr=errs, capsize=3, color="0.7", edgecolor="black", lw=0.6)
        for p, n in zip(pos, names):
            agg = aggregates[n]
            ax.annotate(f"{agg.attain_count}/{agg.n}", (p, 0), xytext=(0, 3), textcoords="offset points",
                        ha="center", va="bottom", fontsize=7)
        ax.set_xticks(pos)
        ax.set_xticklabels(names, rotation=20, ha="right")
        ax.set_ylabel("episodes to threshold")
        if title:
            ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path)

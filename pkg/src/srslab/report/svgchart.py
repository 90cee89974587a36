"""Dependency-free SVG 1.1 line charts of evaluation curves."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

from ..envsim import UsageError
from ..harness import MetricsTimeline

WIDTH = 720
HEIGHT = 420
PLOT_LEFT = 70.0
PLOT_TOP = 30.0
PLOT_RIGHT = 540.0
PLOT_BOTTOM = 360.0
N_TICKS = 5
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")


@dataclass(frozen=True)
class AffineMap:
    """Data extent to plot rectangle, with the y axis flipped."""

    x0: float
    x1: float
    y0: float
    y1: float

    def __call__(self, x: float, y: float) -> tuple[float, float]:
        px = PLOT_LEFT + (x - self.x0) / (self.x1 - self.x0) * (PLOT_RIGHT - PLOT_LEFT)
        py = PLOT_BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (PLOT_BOTTOM - PLOT_TOP)
        return px, py


def _extent(lo: float, hi: float) -> tuple[float, float]:
    if hi > lo:
        return lo, hi
    pad = 0.5 if lo == 0 else abs(lo) * 0.05
    return lo - pad, hi + pad


def data_map(series: Sequence[tuple[str, MetricsTimeline]]) -> AffineMap:
    xs = [x for _, t in series for x in t.episodes]
    ys = [y for _, t in series for y in t.scores]
    x0, x1 = _extent(float(min(xs)), float(max(xs)))
    y0, y1 = _extent(float(min(ys)), float(max(ys)))
    return AffineMap(x0, x1, y0, y1)


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _tick_label(v: float) -> str:
    return f"{v:.4g}"


def render_chart(series: Sequence[tuple[str, MetricsTimeline]], title: str = "",
                 xlabel: str = "training episodes", ylabel: str = "evaluation score") -> str:
    series = list(series)
    if not series:
        raise UsageError("emit_chart needs at least one series")
    for name, t in series:
        if not t.scores:
            raise UsageError(f"series {name!r} is empty")
        if not all(math.isfinite(y) for y in t.scores):
            raise UsageError(f"series {name!r} has non-finite scores")
    m = data_map(series)
    out = [
        '<?xml version="1.0" encoding="UTF-8" standalone="no"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
    ]
    if title:
        out.append(f'<text x="{_fmt((PLOT_LEFT + PLOT_RIGHT) / 2)}" y="18" text-anchor="middle" '
                   f'font-size="14">{escape(title)}</text>')
    out.append(f'<rect x="{_fmt(PLOT_LEFT)}" y="{_fmt(PLOT_TOP)}" width="{_fmt(PLOT_RIGHT - PLOT_LEFT)}" '
               f'height="{_fmt(PLOT_BOTTOM - PLOT_TOP)}" fill="none" stroke="black"/>')
    for i in range(N_TICKS + 1):
        xv = m.x0 + (m.x1 - m.x0) * i / N_TICKS
        yv = m.y0 + (m.y1 - m.y0) * i / N_TICKS
        px, _ = m(xv, m.y0)
        _, py = m(m.x0, yv)
        out.append(f'<line x1="{_fmt(px)}" y1="{_fmt(PLOT_BOTTOM)}" x2="{_fmt(px)}" '
                   f'y2="{_fmt(PLOT_BOTTOM + 5)}" stroke="black"/>')
        out.append(f'<text x="{_fmt(px)}" y="{_fmt(PLOT_BOTTOM + 18)}" text-anchor="middle">'
                   f'{_tick_label(xv)}</text>')
        out.append(f'<line x1="{_fmt(PLOT_LEFT - 5)}" y1="{_fmt(py)}" x2="{_fmt(PLOT_LEFT)}" '
                   f'y2="{_fmt(py)}" stroke="black"/>')
        out.append(f'<text x="{_fmt(PLOT_LEFT - 8)}" y="{_fmt(py + 4)}" text-anchor="end">'
                   f'{_tick_label(yv)}</text>')
    out.append(f'<text x="{_fmt((PLOT_LEFT + PLOT_RIGHT) / 2)}" y="{HEIGHT - 20}" '
               f'text-anchor="middle">{escape(xlabel)}</text>')
    cy = (PLOT_TOP + PLOT_BOTTOM) / 2
    out.append(f'<text x="18" y="{_fmt(cy)}" text-anchor="middle" '
               f'transform="rotate(-90 18 {_fmt(cy)})">{escape(ylabel)}</text>')

    for idx, (name, t) in enumerate(series):
        color = PALETTE[idx % len(PALETTE)]
        pts = " ".join(f"{_fmt(px)},{_fmt(py)}" for px, py in (m(x, y) for x, y in zip(t.episodes, t.scores)))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = PLOT_TOP + 10 + 18 * idx
        out.append(f'<line x1="{_fmt(PLOT_RIGHT + 15)}" y1="{_fmt(ly)}" x2="{_fmt(PLOT_RIGHT + 40)}" '
                   f'y2="{_fmt(ly)}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{_fmt(PLOT_RIGHT + 46)}" y="{_fmt(ly + 4)}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_chart(series: Sequence[tuple[str, MetricsTimeline]], path, **labels) -> Path:
    """Write one polyline per named timeline to ``path``."""
    text = render_chart(series, **labels)
    path = Path(path)
    path.write_text(text, encoding="utf-8")
    return path

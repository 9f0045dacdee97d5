"""Deterministic, dependency-free SVG output for scatter panels and metric curves."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .errors import ContractError
from .persist import write_atomic
from .worlds import PointSet

CANVAS = 400
LEGEND_W = 140
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


@dataclass(frozen=True)
class Style:
    label: str
    color: str = PALETTE[0]
    radius: float = 1.5
    opacity: float = 0.6


def _f(x: float) -> str:
    return f"{x:.2f}"


def _header(width: int, height: int, meta: str | None) -> list[str]:
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
    ]
    if meta:
        out.append(f"<metadata>{escape(meta)}</metadata>")
    out.append(f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>')
    return out


def render_scatter_svg(
    layers: Sequence[tuple[PointSet | np.ndarray, Style]],
    bounds: tuple[float, float, float, float],
    path=None,
    title: str = "",
    meta: str | None = None,
) -> str:
    """Scatter plot of point layers inside ``bounds = (xmin, xmax, ymin, ymax)``.

    Points outside the bounds are dropped and the dropped count is written
    into the legend, so clipping is never silent.
    """
    if not layers:
        raise ContractError("nothing to plot: layer list is empty")
    xmin, xmax, ymin, ymax = bounds
    if not (xmax > xmin and ymax > ymin):
        raise ContractError("plot bounds must have positive extent")
    sx = CANVAS / (xmax - xmin)
    sy = CANVAS / (ymax - ymin)
    lines = _header(CANVAS + LEGEND_W, CANVAS, meta)
    if title:
        lines.append(f'<title>{escape(title)}</title>')
    lines.append(f'<rect x="0" y="0" width="{CANVAS}" height="{CANVAS}" fill="none" stroke="#cccccc"/>')
    for li, (pts, style) in enumerate(layers):
        arr = pts.points if isinstance(pts, PointSet) else np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        inside = (arr[:, 0] >= xmin) & (arr[:, 0] <= xmax) & (arr[:, 1] >= ymin) & (arr[:, 1] <= ymax)
        lines.append(f'<g id="layer{li}" fill="{style.color}" fill-opacity="{style.opacity}">')
        for x, y in arr[inside]:
            cx = (x - xmin) * sx
            cy = (ymax - y) * sy
            lines.append(f'<circle cx="{_f(cx)}" cy="{_f(cy)}" r="{_f(style.radius)}"/>')
        lines.append("</g>")
        dropped = int((~inside).sum())
        label = style.label + (f" ({dropped} clipped)" if dropped else "")
        ly = 20 + 18 * li
        lines.append(f'<circle cx="{CANVAS + 12}" cy="{ly - 4}" r="5" fill="{style.color}"/>')
        lines.append(f'<text x="{CANVAS + 22}" y="{ly}" font-family="sans-serif" font-size="11">{escape(label)}</text>')
    lines.append("</svg>")
    doc = "\n".join(lines) + "\n"
    if path is not None:
        write_atomic(path, doc)
    return doc


def render_curves_svg(
    curves: Mapping[str, tuple[Sequence[float], Sequence[float]]],
    path=None,
    title: str = "",
    ylabel: str = "",
    meta: str | None = None,
) -> str:
    """Line chart of ``{method: (steps, values)}`` with linear axes."""
    if not curves:
        raise ContractError("nothing to plot: no curves given")
    xs = np.concatenate([np.asarray(s, dtype=float) for s, _ in curves.values()])
    ys = np.concatenate([np.asarray(v, dtype=float) for _, v in curves.values()])
    xmin, xmax = float(xs.min()), float(xs.max())
    ymin, ymax = min(0.0, float(ys.min())), float(ys.max())
    if xmax == xmin:
        xmax = xmin + 1.0
    if ymax == ymin:
        ymax = ymin + 1.0
    pad = 40
    inner = CANVAS - 2 * pad

    def px(x):
        return pad + (x - xmin) / (xmax - xmin) * inner

    def py(y):
        return CANVAS - pad - (y - ymin) / (ymax - ymin) * inner

    lines = _header(CANVAS + LEGEND_W, CANVAS, meta)
    if title:
        lines.append(f'<title>{escape(title)}</title>')
    lines.append(f'<line x1="{pad}" y1="{CANVAS - pad}" x2="{CANVAS - pad}" y2="{CANVAS - pad}" stroke="black"/>')
    lines.append(f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{CANVAS - pad}" stroke="black"/>')
    lines.append(f'<text x="{pad}" y="{CANVAS - 8}" font-family="sans-serif" font-size="10">{_f(xmin)}</text>')
    lines.append(f'<text x="{CANVAS - pad}" y="{CANVAS - 8}" font-family="sans-serif" font-size="10">{_f(xmax)}</text>')
    lines.append(f'<text x="2" y="{pad}" font-family="sans-serif" font-size="10">{_f(ymax)}</text>')
    lines.append(f'<text x="2" y="{CANVAS - pad}" font-family="sans-serif" font-size="10">{_f(ymin)}</text>')
    if ylabel:
        lines.append(f'<text x="{pad}" y="{pad - 10}" font-family="sans-serif" font-size="11">{escape(ylabel)}</text>')
    for i, (name, (steps, values)) in enumerate(curves.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{_f(px(x))},{_f(py(y))}" for x, y in zip(steps, values))
        lines.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        ly = 20 + 18 * i
        lines.append(f'<rect x="{CANVAS + 6}" y="{ly - 9}" width="10" height="10" fill="{color}"/>')
        lines.append(f'<text x="{CANVAS + 22}" y="{ly}" font-family="sans-serif" font-size="11">{escape(name)}</text>')
    lines.append("</svg>")
    doc = "\n".join(lines) + "\n"
    if path is not None:
        write_atomic(path, doc)
    return doc

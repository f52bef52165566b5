"""Minimal deterministic SVG line plots.

Pure text generation: the same series always produce byte-identical SVG,
so plots can sit next to checkpoints and reports in reproducibility
checks. Output is plain XML that any browser or text editor opens.
"""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

import numpy as np

from .errors import EmptyOutput, ShapeMismatch

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")

_MARGIN_LEFT = 64
_MARGIN_RIGHT = 18
_MARGIN_TOP = 30
_MARGIN_BOTTOM = 52


def _nice_step(span: float, target: int) -> float:
    """Largest 1/2/5 ladder step giving at least ``target`` intervals."""
    raw = span / max(target, 1)
    mag = 10.0 ** math.floor(math.log10(raw)) if raw > 0 else 1.0
    for mult in (1.0, 2.0, 5.0, 10.0):
        if mag * mult >= raw:
            return mag * mult
    return mag * 10.0


def _ticks(lo: float, hi: float, target: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    step = _nice_step(hi - lo, target)
    first = math.ceil(lo / step - 1e-9) * step
    out = []
    v = first
    while v <= hi + step * 1e-9:
        out.append(0.0 if abs(v) < step * 1e-9 else v)
        v += step
    return out


def _fmt_tick(v: float) -> str:
    return f"{v:.6g}"


def _coord(v: float) -> str:
    return f"{v:.2f}"


def _clean_series(series):
    """Normalize to (label, xs, ys) float arrays with non-finite pairs dropped."""
    cleaned = []
    for label, xs, ys in series:
        xs = np.asarray(xs, dtype=np.float64).ravel()
        ys = np.asarray(ys, dtype=np.float64).ravel()
        if xs.shape != ys.shape:
            raise ShapeMismatch(
                f"series {label!r}: {xs.shape[0]} x values vs {ys.shape[0]} y values"
            )
        keep = np.isfinite(xs) & np.isfinite(ys)
        cleaned.append((str(label), xs[keep], ys[keep]))
    if not any(len(xs) for _, xs, _ in cleaned):
        raise EmptyOutput("no finite points to plot")
    return cleaned


def line_plot(
    series,
    *,
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
    width: int = 720,
    height: int = 440,
    y_range: tuple[float, float] | None = None,
) -> str:
    """Render ``series`` (iterable of ``(label, xs, ys)``) as an SVG string.

    Axis limits come from the data (or ``y_range``); ticks sit on a 1/2/5
    ladder. Coordinates are written with fixed precision so output bytes
    are a pure function of the inputs.
    """
    cleaned = _clean_series(series)
    xs_all = np.concatenate([xs for _, xs, _ in cleaned if len(xs)])
    ys_all = np.concatenate([ys for _, _, ys in cleaned if len(ys)])
    x_lo, x_hi = float(xs_all.min()), float(xs_all.max())
    if y_range is not None:
        y_lo, y_hi = float(y_range[0]), float(y_range[1])
    else:
        y_lo, y_hi = float(ys_all.min()), float(ys_all.max())
    if x_hi <= x_lo:
        x_lo, x_hi = x_lo - 0.5, x_hi + 0.5
    if y_hi <= y_lo:
        y_lo, y_hi = y_lo - 0.5, y_hi + 0.5

    px_w = width - _MARGIN_LEFT - _MARGIN_RIGHT
    px_h = height - _MARGIN_TOP - _MARGIN_BOTTOM

    def sx(v: float) -> float:
        return _MARGIN_LEFT + (v - x_lo) / (x_hi - x_lo) * px_w

    def sy(v: float) -> float:
        return _MARGIN_TOP + (y_hi - v) / (y_hi - y_lo) * px_h

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>',
        f'<rect x="{_MARGIN_LEFT}" y="{_MARGIN_TOP}" width="{px_w}" height="{px_h}" '
        'fill="none" stroke="#333333" stroke-width="1"/>',
    ]
    if title:
        out.append(
            f'<text x="{width / 2:.1f}" y="19" text-anchor="middle" '
            f'font-family="monospace" font-size="14">{escape(title)}</text>'
        )

    for v in _ticks(x_lo, x_hi):
        x = sx(v)
        out.append(
            f'<line x1="{_coord(x)}" y1="{_MARGIN_TOP}" x2="{_coord(x)}" '
            f'y2="{_MARGIN_TOP + px_h}" stroke="#dddddd" stroke-width="1"/>'
        )
        out.append(
            f'<text x="{_coord(x)}" y="{_MARGIN_TOP + px_h + 16}" text-anchor="middle" '
            f'font-family="monospace" font-size="11">{_fmt_tick(v)}</text>'
        )
    for v in _ticks(y_lo, y_hi):
        y = sy(v)
        out.append(
            f'<line x1="{_MARGIN_LEFT}" y1="{_coord(y)}" x2="{_MARGIN_LEFT + px_w}" '
            f'y2="{_coord(y)}" stroke="#dddddd" stroke-width="1"/>'
        )
        out.append(
            f'<text x="{_MARGIN_LEFT - 6}" y="{_coord(y + 3.5)}" text-anchor="end" '
            f'font-family="monospace" font-size="11">{_fmt_tick(v)}</text>'
        )
    if xlabel:
        out.append(
            f'<text x="{_MARGIN_LEFT + px_w / 2:.1f}" y="{height - 12}" '
            f'text-anchor="middle" font-family="monospace" font-size="12">'
            f"{escape(xlabel)}</text>"
        )
    if ylabel:
        out.append(
            f'<text x="15" y="{_MARGIN_TOP + px_h / 2:.1f}" text-anchor="middle" '
            f'font-family="monospace" font-size="12" '
            f'transform="rotate(-90 15 {_MARGIN_TOP + px_h / 2:.1f})">'
            f"{escape(ylabel)}</text>"
        )

    for i, (label, xs, ys) in enumerate(cleaned):
        color = PALETTE[i % len(PALETTE)]
        if len(xs):
            pts = " ".join(f"{_coord(sx(x))},{_coord(sy(y))}" for x, y in zip(xs, ys))
            out.append(
                f'<polyline points="{pts}" fill="none" stroke="{color}" '
                'stroke-width="1.5"/>'
            )
        ly = _MARGIN_TOP + 14 + 15 * i
        lx = _MARGIN_LEFT + px_w - 150
        out.append(
            f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 18}" y2="{ly - 4}" '
            f'stroke="{color}" stroke-width="2"/>'
        )
        out.append(
            f'<text x="{lx + 24}" y="{ly}" font-family="monospace" font-size="11">'
            f"{escape(label)}</text>"
        )

    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(path, svg: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(svg)

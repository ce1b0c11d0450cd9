"""Minimal SVG emitters: scatter, line and heat map. No plotting dependency."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")

_W, _H = 480, 360
_L, _R, _T, _B = 60, 130, 30, 50


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def _range(values: Sequence[float]) -> tuple[float, float]:
    lo, hi = min(values), max(values)
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def _frame(title: str, xlabel: str, ylabel: str, xr, yr) -> list[str]:
    pw, ph = _W - _L - _R, _H - _T - _B
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<rect x="{_L}" y="{_T}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
        f'<text x="{_L + pw / 2}" y="{_H - 12}" text-anchor="middle" font-size="11">{escape(xlabel)}</text>',
        f'<text x="14" y="{_T + ph / 2}" text-anchor="middle" font-size="11" transform="rotate(-90 14 {_T + ph / 2})">{escape(ylabel)}</text>',
    ]
    for frac in (0.0, 0.5, 1.0):
        xv = xr[0] + frac * (xr[1] - xr[0])
        yv = yr[0] + frac * (yr[1] - yr[0])
        out.append(f'<text x="{_L + frac * pw}" y="{_T + ph + 14}" text-anchor="middle" font-size="9">{_fmt(xv)}</text>')
        out.append(f'<text x="{_L - 4}" y="{_T + ph - frac * ph + 3}" text-anchor="end" font-size="9">{_fmt(yv)}</text>')
    return out


def _project(x, y, xr, yr) -> tuple[float, float]:
    pw, ph = _W - _L - _R, _H - _T - _B
    px = _L + (x - xr[0]) / (xr[1] - xr[0]) * pw
    py = _T + ph - (y - yr[0]) / (yr[1] - yr[0]) * ph
    return px, py


def _legend(names: Sequence[str]) -> list[str]:
    out = []
    for i, name in enumerate(names):
        y = _T + 10 + 16 * i
        out.append(f'<rect x="{_W - _R + 10}" y="{y - 8}" width="10" height="10" fill="{PALETTE[i % len(PALETTE)]}"/>')
        out.append(f'<text x="{_W - _R + 24}" y="{y + 1}" font-size="10">{escape(name)}</text>')
    return out


def scatter_svg(groups: dict[str, Sequence[tuple[float, float]]], title: str, xlabel: str = "PC1", ylabel: str = "PC2") -> str:
    xs = [p[0] for pts in groups.values() for p in pts]
    ys = [p[1] for pts in groups.values() for p in pts]
    xr, yr = _range(xs), _range(ys)
    out = _frame(title, xlabel, ylabel, xr, yr)
    for i, pts in enumerate(groups.values()):
        color = PALETTE[i % len(PALETTE)]
        for x, y in pts:
            px, py = _project(x, y, xr, yr)
            out.append(f'<circle cx="{px:.2f}" cy="{py:.2f}" r="2.5" fill="{color}" fill-opacity="0.6"/>')
    out += _legend(list(groups))
    out.append("</svg>")
    return "\n".join(out) + "\n"


def line_svg(series: dict[str, Sequence[tuple[float, float]]], title: str, xlabel: str, ylabel: str, log_x: bool = False) -> str:
    def tx(v):
        return math.log10(v) if log_x else v

    xs = [tx(p[0]) for pts in series.values() for p in pts]
    ys = [p[1] for pts in series.values() for p in pts]
    xr, yr = _range(xs), _range(ys)
    out = _frame(title, f"log10 {xlabel}" if log_x else xlabel, ylabel, xr, yr)
    for i, pts in enumerate(series.values()):
        color = PALETTE[i % len(PALETTE)]
        coords = [_project(tx(x), y, xr, yr) for x, y in sorted(pts)]
        path = " ".join(f"{px:.2f},{py:.2f}" for px, py in coords)
        out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for px, py in coords:
            out.append(f'<circle cx="{px:.2f}" cy="{py:.2f}" r="3" fill="{color}"/>')
    out += _legend(list(series))
    out.append("</svg>")
    return "\n".join(out) + "\n"


def heatmap_svg(labels: Sequence[str], cells: dict[tuple[int, int], float], title: str) -> str:
    """Upper-triangular heat map; ``cells`` maps (row, col) with row <= col to a value."""
    n = len(labels)
    size = 56
    left, top = 70, 40
    width, height = left + n * size + 20, top + n * size + 40
    vals = list(cells.values())
    lo, hi = (min(vals), max(vals)) if vals else (0.0, 1.0)
    span = hi - lo or 1.0
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="13">{escape(title)}</text>',
    ]
    for i, name in enumerate(labels):
        out.append(f'<text x="{left - 6}" y="{top + i * size + size / 2 + 4}" text-anchor="end" font-size="10">{escape(name)}</text>')
        out.append(f'<text x="{left + i * size + size / 2}" y="{top + n * size + 14}" text-anchor="middle" font-size="10">{escape(name)}</text>')
    for (r, c), v in sorted(cells.items()):
        shade = (v - lo) / span
        red = int(255 - 200 * shade)
        green = int(255 - 120 * shade)
        out.append(
            f'<rect x="{left + c * size}" y="{top + r * size}" width="{size}" height="{size}" '
            f'fill="rgb({red},{green},255)" stroke="white"/>'
        )
        out.append(f'<text x="{left + c * size + size / 2}" y="{top + r * size + size / 2 + 4}" text-anchor="middle" font-size="10">{v:.3f}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(path: str | Path, svg: str) -> None:
    Path(path).write_text(svg, encoding="utf-8")

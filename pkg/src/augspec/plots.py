"""Minimal native SVG charts for sweep and alignment reports.

Plots are a convenience; the CSV files are the record. Output is a pure
function of the inputs, so repeated runs give byte-identical files.
"""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 480, 320
MARGIN = dict(left=60, right=20, top=34, bottom=46)
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _num(v: float) -> str:
    return format(float(v), ".2f")


def _label(v: float) -> str:
    return format(float(v), ".3g")


class _Frame:
    """Maps data coordinates to the plotting area."""

    def __init__(self, x_range, y_range):
        self.x0, self.x1 = x_range
        self.y0, self.y1 = y_range
        if self.x1 == self.x0:
            self.x0, self.x1 = self.x0 - 0.5, self.x1 + 0.5
        if self.y1 == self.y0:
            pad = max(abs(self.y0), 1.0) * 0.05
            self.y0, self.y1 = self.y0 - pad, self.y1 + pad
        self.left = MARGIN["left"]
        self.right = WIDTH - MARGIN["right"]
        self.top = MARGIN["top"]
        self.bottom = HEIGHT - MARGIN["bottom"]

    def px(self, x: float) -> float:
        return self.left + (x - self.x0) / (self.x1 - self.x0) * (self.right - self.left)

    def py(self, y: float) -> float:
        return self.bottom - (y - self.y0) / (self.y1 - self.y0) * (self.bottom - self.top)


def _padded(lo: float, hi: float) -> tuple[float, float]:
    pad = 0.05 * (hi - lo) if hi > lo else 0.0
    return lo - pad, hi + pad


def _axes(fr: _Frame, title: str, xlabel: str, ylabel: str, xticks) -> list[str]:
    out = [
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<line x1="{fr.left}" y1="{fr.bottom}" x2="{fr.right}" y2="{fr.bottom}" stroke="black"/>',
        f'<line x1="{fr.left}" y1="{fr.top}" x2="{fr.left}" y2="{fr.bottom}" stroke="black"/>',
        f'<text x="{WIDTH / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<text x="{WIDTH / 2}" y="{HEIGHT - 8}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
        f'<text x="14" y="{HEIGHT / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {HEIGHT / 2})">{escape(ylabel)}</text>',
    ]
    for pos, text in xticks:
        x = _num(fr.px(pos))
        out.append(f'<line x1="{x}" y1="{fr.bottom}" x2="{x}" y2="{fr.bottom + 4}" stroke="black"/>')
        out.append(f'<text x="{x}" y="{fr.bottom + 16}" text-anchor="middle" font-size="10">{escape(text)}</text>')
    for y in np.linspace(fr.y0, fr.y1, 5):
        py = _num(fr.py(y))
        out.append(f'<line x1="{fr.left - 4}" y1="{py}" x2="{fr.left}" y2="{py}" stroke="black"/>')
        out.append(f'<text x="{fr.left - 6}" y="{py}" text-anchor="end" dominant-baseline="middle" '
                   f'font-size="10">{_label(y)}</text>')
    return out


def _document(body: list[str]) -> str:
    head = f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">'
    return "\n".join([head, *body, "</svg>"]) + "\n"


def line_chart(series: Mapping[str, tuple[Sequence[float], Sequence[float]]], title: str = "",
               xlabel: str = "", ylabel: str = "") -> str:
    """Polyline per named series; non-finite points are skipped."""
    pts = {k: [(float(x), float(y)) for x, y in zip(*v) if np.isfinite(x) and np.isfinite(y)]
           for k, v in series.items()}
    allx = [p[0] for v in pts.values() for p in v] or [0.0]
    ally = [p[1] for v in pts.values() for p in v] or [0.0]
    fr = _Frame((min(allx), max(allx)), _padded(min(ally), max(ally)))
    ticks = [(x, _label(x)) for x in sorted(set(allx))]
    body = _axes(fr, title, xlabel, ylabel, ticks)
    for i, (name, v) in enumerate(pts.items()):
        color = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{_num(fr.px(x))},{_num(fr.py(y))}" for x, y in v)
        body.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, y in v:
            body.append(f'<circle cx="{_num(fr.px(x))}" cy="{_num(fr.py(y))}" r="3" fill="{color}"/>')
        body.append(f'<text x="{fr.right - 4}" y="{fr.top + 14 * (i + 1)}" text-anchor="end" '
                    f'font-size="11" fill="{color}">{escape(name)}</text>')
    return _document(body)


def box_plot(groups: Mapping[str, Sequence[float]], title: str = "", ylabel: str = "",
             xlabel: str = "") -> str:
    """Quartile box, median line and min/max whiskers per group."""
    clean = {k: np.asarray([v for v in vals if np.isfinite(v)], dtype=float) for k, vals in groups.items()}
    ally = np.concatenate([v for v in clean.values() if v.size] or [np.zeros(1)])
    n = len(clean)
    fr = _Frame((-0.5, n - 0.5), _padded(float(ally.min()), float(ally.max())))
    body = _axes(fr, title, xlabel, ylabel, [(i, k) for i, k in enumerate(clean)])
    half = 0.3 * (fr.px(1) - fr.px(0)) if n > 1 else 40.0
    for i, vals in enumerate(clean.values()):
        if not vals.size:
            continue
        q0, q1, q2, q3, q4 = np.percentile(vals, [0, 25, 50, 75, 100])
        cx = fr.px(i)
        left, right = _num(cx - half), _num(cx + half)
        body.append(f'<line x1="{_num(cx)}" y1="{_num(fr.py(q0))}" x2="{_num(cx)}" y2="{_num(fr.py(q4))}" stroke="black"/>')
        body.append(f'<rect x="{left}" y="{_num(fr.py(q3))}" width="{_num(2 * half)}" '
                    f'height="{_num(fr.py(q1) - fr.py(q3))}" fill="{PALETTE[0]}" fill-opacity="0.4" stroke="black"/>')
        body.append(f'<line x1="{left}" y1="{_num(fr.py(q2))}" x2="{right}" y2="{_num(fr.py(q2))}" '
                    f'stroke="black" stroke-width="2"/>')
    return _document(body)


def save_svg(text: str, path) -> None:
    Path(path).write_text(text)

"""Minimal SVG charts: a bar chart and a line chart, both with std error bars."""

from __future__ import annotations

import math
from typing import Sequence
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 640, 400
MARGIN = dict(left=70, right=20, top=40, bottom=80)


def _nice_max(value: float) -> float:
    if not math.isfinite(value) or value <= 0:
        return 1.0
    exp = 10 ** math.floor(math.log10(value))
    for step in (1, 2, 2.5, 5, 10):
        if step * exp >= value:
            return step * exp
    return 10 * exp


def _frame(title: str, y_label: str, y_max: float) -> list[str]:
    left, top = MARGIN["left"], MARGIN["top"]
    bottom = HEIGHT - MARGIN["bottom"]
    right = WIDTH - MARGIN["right"]
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>',
        f'<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>',
        f'<text x="18" y="{(top + bottom) / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 18 {(top + bottom) / 2:.1f})">{escape(y_label)}</text>',
    ]
    for i in range(6):
        value = y_max * i / 5
        y = _y(value, y_max)
        out.append(f'<line x1="{left - 4}" y1="{y:.1f}" x2="{left}" y2="{y:.1f}" stroke="black"/>')
        out.append(f'<text x="{left - 7}" y="{y + 4:.1f}" text-anchor="end">{value:g}</text>')
    return out


def _y(value: float, y_max: float) -> float:
    bottom = HEIGHT - MARGIN["bottom"]
    return bottom - (bottom - MARGIN["top"]) * value / y_max


def _error_bar(x: float, mean: float, std: float, y_max: float) -> str:
    lo, hi = _y(max(mean - std, 0.0), y_max), _y(mean + std, y_max)
    return (f'<path d="M{x - 5:.1f},{hi:.1f} H{x + 5:.1f} M{x:.1f},{hi:.1f} V{lo:.1f} '
            f'M{x - 5:.1f},{lo:.1f} H{x + 5:.1f}" stroke="black" fill="none"/>')


def bar_chart(labels: Sequence[str], means: Sequence[float], stds: Sequence[float],
              title: str, y_label: str = "RMSE") -> str:
    """Bars with +-std whiskers; non-finite means are drawn as a 'FAILED' label."""
    finite = [m + s for m, s in zip(means, stds) if math.isfinite(m)]
    y_max = _nice_max(max(finite, default=1.0) * 1.05)
    out = _frame(title, y_label, y_max)
    slot = (WIDTH - MARGIN["left"] - MARGIN["right"]) / max(len(labels), 1)
    bottom = HEIGHT - MARGIN["bottom"]
    for i, (label, mean, std) in enumerate(zip(labels, means, stds)):
        x = MARGIN["left"] + slot * (i + 0.5)
        if math.isfinite(mean):
            top = _y(mean, y_max)
            out.append(f'<rect x="{x - slot * 0.3:.1f}" y="{top:.1f}" width="{slot * 0.6:.1f}" '
                       f'height="{bottom - top:.1f}" fill="#4c72b0"/>')
            out.append(_error_bar(x, mean, std if math.isfinite(std) else 0.0, y_max))
        else:
            out.append(f'<text x="{x:.1f}" y="{bottom - 6}" text-anchor="middle" fill="#c44e52">FAILED</text>')
        out.append(f'<text x="{x:.1f}" y="{bottom + 16}" text-anchor="end" '
                   f'transform="rotate(-30 {x:.1f} {bottom + 16})">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def line_chart(xs: Sequence[float], means: Sequence[float], stds: Sequence[float],
               title: str, x_label: str, y_label: str = "RMSE") -> str:
    """Polyline through the finite means, evenly spaced along x, with std bars."""
    finite = [m + s for m, s in zip(means, stds) if math.isfinite(m)]
    y_max = _nice_max(max(finite, default=1.0) * 1.05)
    out = _frame(title, y_label, y_max)
    slot = (WIDTH - MARGIN["left"] - MARGIN["right"]) / max(len(xs), 1)
    bottom = HEIGHT - MARGIN["bottom"]
    points = []
    for i, (x_value, mean, std) in enumerate(zip(xs, means, stds)):
        x = MARGIN["left"] + slot * (i + 0.5)
        out.append(f'<text x="{x:.1f}" y="{bottom + 18}" text-anchor="middle">{x_value:g}</text>')
        if not math.isfinite(mean):
            out.append(f'<text x="{x:.1f}" y="{bottom - 6}" text-anchor="middle" fill="#c44e52">FAILED</text>')
            continue
        points.append(f"{x:.1f},{_y(mean, y_max):.1f}")
        out.append(_error_bar(x, mean, std if math.isfinite(std) else 0.0, y_max))
        out.append(f'<circle cx="{x:.1f}" cy="{_y(mean, y_max):.1f}" r="3.5" fill="#4c72b0"/>')
    if points:
        out.append(f'<polyline points="{" ".join(points)}" fill="none" stroke="#4c72b0" stroke-width="2"/>')
    out.append(f'<text x="{WIDTH / 2:.1f}" y="{HEIGHT - 30}" text-anchor="middle">{escape(x_label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"

"""Dependency-free SVG line charts and histograms with byte-stable output."""

from __future__ import annotations

import math
from typing import Sequence

COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]

WIDTH, HEIGHT = 800, 480
LEFT, RIGHT, TOP, BOTTOM = 80, 200, 50, 60


def _esc(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace('"', "&quot;")


def _num(x: float) -> str:
    return f"{x:.2f}"


def _tick_label(v: float) -> str:
    if v == 0:
        return "0"
    if abs(v) >= 1e4 or abs(v) < 1e-3:
        return f"{v:.2e}"
    return f"{v:.4g}"


def _range(values: Sequence[float]) -> tuple[float, float]:
    finite = [v for v in values if math.isfinite(v)]
    if not finite:
        return 0.0, 1.0
    lo, hi = min(finite), max(finite)
    if lo == hi:
        pad = abs(lo) * 0.1 or 1.0
        return lo - pad, hi + pad
    pad = (hi - lo) * 0.05
    return lo - pad, hi + pad


def _frame(title: str, x_label: str, y_label: str) -> list[str]:
    w, h = WIDTH, HEIGHT
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
        f'<rect x="0" y="0" width="{w}" height="{h}" fill="#ffffff"/>',
        f'<text x="{w / 2:.1f}" y="28" text-anchor="middle" font-size="18" font-family="sans-serif">{_esc(title)}</text>',
        f'<text x="{LEFT + (w - LEFT - RIGHT) / 2:.1f}" y="{h - 14}" text-anchor="middle" font-size="14" font-family="sans-serif">{_esc(x_label)}</text>',
        f'<text x="18" y="{TOP + (h - TOP - BOTTOM) / 2:.1f}" text-anchor="middle" font-size="14" font-family="sans-serif" '
        f'transform="rotate(-90 18 {TOP + (h - TOP - BOTTOM) / 2:.1f})">{_esc(y_label)}</text>',
    ]


def _axes(lines: list[str], x0: float, x1: float, y0: float, y1: float) -> tuple:
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM
    bottom = HEIGHT - BOTTOM

    def px(x):
        return LEFT + (x - x0) / (x1 - x0) * pw

    def py(y):
        return bottom - (y - y0) / (y1 - y0) * ph

    lines.append(f'<line x1="{LEFT}" y1="{bottom}" x2="{LEFT + pw}" y2="{bottom}" stroke="#000000"/>')
    lines.append(f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{bottom}" stroke="#000000"/>')
    for i in range(6):
        yv = y0 + (y1 - y0) * i / 5
        lines.append(f'<line x1="{LEFT - 5}" y1="{_num(py(yv))}" x2="{LEFT}" y2="{_num(py(yv))}" stroke="#000000"/>')
        lines.append(
            f'<text x="{LEFT - 8}" y="{_num(py(yv) + 4)}" text-anchor="end" font-size="11" font-family="sans-serif">{_tick_label(yv)}</text>'
        )
        xv = x0 + (x1 - x0) * i / 5
        lines.append(f'<line x1="{_num(px(xv))}" y1="{bottom}" x2="{_num(px(xv))}" y2="{bottom + 5}" stroke="#000000"/>')
        lines.append(
            f'<text x="{_num(px(xv))}" y="{bottom + 18}" text-anchor="middle" font-size="11" font-family="sans-serif">{_tick_label(xv)}</text>'
        )
    return px, py


def line_chart(
    title: str,
    x_label: str,
    y_label: str,
    series: Sequence[tuple[str, Sequence[float], Sequence[float]]],
    empty_note: str = "no data",
) -> str:
    """One polyline per (label, xs, ys) series. Non-finite points are skipped."""
    lines = _frame(title, x_label, y_label)
    xs_all = [x for _, xs, _ in series for x in xs]
    ys_all = [y for _, _, ys in series for y in ys]
    if not xs_all:
        lines.append(
            f'<text x="{WIDTH / 2:.1f}" y="{HEIGHT / 2:.1f}" text-anchor="middle" font-size="16" font-family="sans-serif" '
            f'fill="#777777">{_esc(empty_note)}</text>'
        )
        lines.append("</svg>")
        return "\n".join(lines) + "\n"
    x0, x1 = _range(xs_all)
    y0, y1 = _range(ys_all)
    px, py = _axes(lines, x0, x1, y0, y1)
    for i, (label, xs, ys) in enumerate(series):
        color = COLORS[i % len(COLORS)]
        pts = " ".join(f"{_num(px(x))},{_num(py(y))}" for x, y in zip(xs, ys) if math.isfinite(y))
        lines.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        ly = TOP + 10 + i * 18
        lx = WIDTH - RIGHT + 15
        lines.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 20}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        lines.append(f'<text x="{lx + 26}" y="{ly + 4}" font-size="11" font-family="sans-serif">{_esc(label)}</text>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def histogram_chart(title: str, edges: Sequence[float], counts: Sequence[int], x_label: str = "value") -> str:
    lines = _frame(title, x_label, "count")
    x0, x1 = float(edges[0]), float(edges[-1])
    y1 = max(max(counts), 1) * 1.05
    px, py = _axes(lines, x0, x1, 0.0, y1)
    for lo, hi, c in zip(edges[:-1], edges[1:], counts):
        top = py(c)
        lines.append(
            f'<rect x="{_num(px(lo))}" y="{_num(top)}" width="{_num(max(px(hi) - px(lo), 0.5))}" '
            f'height="{_num(py(0.0) - top)}" fill="#1f77b4" stroke="#ffffff" stroke-width="0.5"/>'
        )
    lines.append("</svg>")
    return "\n".join(lines) + "\n"

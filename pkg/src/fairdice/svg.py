"""Tiny self-contained SVG plots: line charts with CI bands and box plots.

Output is a pure function of the inputs (fixed formatting, no timestamps),
so regenerating a plot from the same CSV gives identical bytes.
"""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")
W, H = 480, 320
LEFT, RIGHT, TOP, BOTTOM = 64, 112, 28, 44


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def _nice_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if not math.isfinite(lo) or not math.isfinite(hi):
        return []
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    start = math.ceil(lo / step) * step
    ticks = []
    t = start
    while t <= hi + 1e-9 * step:
        ticks.append(round(t, 12))
        t += step
    return ticks


def _label(v: float) -> str:
    return f"{v:.4g}"


class _Canvas:
    def __init__(self, title: str, xlabel: str, ylabel: str):
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" '
            'font-family="sans-serif" font-size="11">',
            f'<rect width="{W}" height="{H}" fill="white"/>',
            f'<text x="{W / 2}" y="16" text-anchor="middle" font-size="13">{escape(title)}</text>',
            f'<text x="{LEFT + (W - LEFT - RIGHT) / 2}" y="{H - 8}" text-anchor="middle">{escape(xlabel)}</text>',
            f'<text x="14" y="{TOP + (H - TOP - BOTTOM) / 2}" text-anchor="middle" '
            f'transform="rotate(-90 14 {TOP + (H - TOP - BOTTOM) / 2})">{escape(ylabel)}</text>',
        ]

    def add(self, s: str):
        self.parts.append(s)

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def _frame(c: _Canvas, xticks, xmap, xlabels, yticks, ymap):
    x0, x1, y0, y1 = LEFT, W - RIGHT, H - BOTTOM, TOP
    c.add(f'<rect x="{x0}" y="{y1}" width="{x1 - x0}" height="{y0 - y1}" fill="none" stroke="#333"/>')
    for t, lab in zip(xticks, xlabels):
        px = _fmt(xmap(t))
        c.add(f'<line x1="{px}" y1="{y0}" x2="{px}" y2="{y0 + 4}" stroke="#333"/>')
        c.add(f'<text x="{px}" y="{y0 + 16}" text-anchor="middle">{escape(lab)}</text>')
    for t in yticks:
        py = _fmt(ymap(t))
        c.add(f'<line x1="{x0 - 4}" y1="{py}" x2="{x1}" y2="{py}" stroke="#ddd"/>')
        c.add(f'<text x="{x0 - 6}" y="{py}" text-anchor="end" dominant-baseline="middle">{_label(t)}</text>')


def line_plot(series: dict, title: str, xlabel: str, ylabel: str, logx: bool = True,
              hlines: dict | None = None) -> str:
    """``series``: {name: [(x, mean, ci_halfwidth), ...]}; CI drawn as a band.

    ``hlines`` adds labelled horizontal reference lines, e.g. baseline
    policies.
    """
    hlines = hlines or {}
    pts = [(x, m, c) for s in series.values() for x, m, c in s if math.isfinite(m)]
    if not pts:
        raise ValueError("nothing finite to plot")
    tx = (lambda x: math.log10(x)) if logx else (lambda x: x)
    xs = [tx(x) for x, _, _ in pts]
    ys = [m - (c if math.isfinite(c) else 0) for _, m, c in pts] + \
         [m + (c if math.isfinite(c) else 0) for _, m, c in pts] + list(hlines.values())
    xlo, xhi = min(xs), max(xs)
    ylo, yhi = min(ys), max(ys)
    if xhi == xlo:
        xlo, xhi = xlo - 1, xhi + 1
    pad = 0.05 * (yhi - ylo) if yhi > ylo else 1.0
    ylo, yhi = ylo - pad, yhi + pad

    def xmap(v):
        return LEFT + (v - xlo) / (xhi - xlo) * (W - LEFT - RIGHT)

    def ymap(v):
        return (H - BOTTOM) - (v - ylo) / (yhi - ylo) * (H - TOP - BOTTOM)

    c = _Canvas(title, xlabel, ylabel)
    if logx:
        xticks = list(range(math.ceil(xlo), math.floor(xhi) + 1))
        xlabels = [f"1e{t}" for t in xticks]
    else:
        xticks = _nice_ticks(xlo, xhi)
        xlabels = [_label(t) for t in xticks]
    _frame(c, xticks, xmap, xlabels, _nice_ticks(ylo, yhi), ymap)
    for i, (name, s) in enumerate(series.items()):
        colour = PALETTE[i % len(PALETTE)]
        s = sorted((tx(x), m, cc if math.isfinite(cc) else 0.0) for x, m, cc in s if math.isfinite(m))
        if not s:
            continue
        upper = " ".join(f"{_fmt(xmap(x))},{_fmt(ymap(m + cc))}" for x, m, cc in s)
        lower = " ".join(f"{_fmt(xmap(x))},{_fmt(ymap(m - cc))}" for x, m, cc in reversed(s))
        c.add(f'<polygon points="{upper} {lower}" fill="{colour}" fill-opacity="0.18" stroke="none"/>')
        line = " ".join(f"{_fmt(xmap(x))},{_fmt(ymap(m))}" for x, m, _ in s)
        c.add(f'<polyline points="{line}" fill="none" stroke="{colour}" stroke-width="1.8"/>')
        ly = TOP + 14 * i + 8
        c.add(f'<line x1="{W - RIGHT + 8}" y1="{ly}" x2="{W - RIGHT + 24}" y2="{ly}" stroke="{colour}" stroke-width="2"/>')
        c.add(f'<text x="{W - RIGHT + 28}" y="{ly}" dominant-baseline="middle">{escape(str(name))}</text>')
    for j, (name, v) in enumerate(hlines.items()):
        py = _fmt(ymap(v))
        c.add(f'<line x1="{LEFT}" y1="{py}" x2="{W - RIGHT}" y2="{py}" stroke="#555" stroke-dasharray="4 3"/>')
        c.add(f'<text x="{W - RIGHT + 4}" y="{py}" dominant-baseline="middle" fill="#555">{escape(str(name))}</text>')
    return c.render()


def box_plot(groups: dict, title: str, xlabel: str, ylabel: str) -> str:
    """``groups``: {label: samples}; whiskers at min/max, box at quartiles."""
    import numpy as np

    data = {k: np.asarray(v, dtype=float) for k, v in groups.items()}
    data = {k: v[np.isfinite(v)] for k, v in data.items()}
    data = {k: v for k, v in data.items() if len(v)}
    if not data:
        raise ValueError("nothing finite to plot")
    allv = np.concatenate(list(data.values()))
    ylo, yhi = float(allv.min()), float(allv.max())
    pad = 0.05 * (yhi - ylo) if yhi > ylo else 1.0
    ylo, yhi = ylo - pad, yhi + pad
    n = len(data)

    def xmap(i):
        return LEFT + (i + 0.5) / n * (W - LEFT - RIGHT)

    def ymap(v):
        return (H - BOTTOM) - (v - ylo) / (yhi - ylo) * (H - TOP - BOTTOM)

    c = _Canvas(title, xlabel, ylabel)
    _frame(c, list(range(n)), xmap, [str(k) for k in data], _nice_ticks(ylo, yhi), ymap)
    half = 0.3 * (W - LEFT - RIGHT) / n
    for i, v in enumerate(data.values()):
        q1, med, q3 = np.percentile(v, [25, 50, 75])
        cx = xmap(i)
        c.add(f'<line x1="{_fmt(cx)}" y1="{_fmt(ymap(v.min()))}" x2="{_fmt(cx)}" y2="{_fmt(ymap(v.max()))}" stroke="#333"/>')
        c.add(f'<rect x="{_fmt(cx - half)}" y="{_fmt(ymap(q3))}" width="{_fmt(2 * half)}" '
              f'height="{_fmt(max(ymap(q1) - ymap(q3), 0.5))}" fill="{PALETTE[0]}" fill-opacity="0.35" stroke="#333"/>')
        c.add(f'<line x1="{_fmt(cx - half)}" y1="{_fmt(ymap(med))}" x2="{_fmt(cx + half)}" y2="{_fmt(ymap(med))}" '
              'stroke="#000" stroke-width="2"/>')
    return c.render()

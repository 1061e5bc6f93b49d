"""Minimal SVG line charts with optional log axes and error bars."""
from __future__ import annotations

import math
from xml.sax.saxutils import escape

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"]


def _ticks(lo, hi, log):
    if log:
        a, b = math.floor(math.log10(lo)), math.ceil(math.log10(hi))
        ticks = [10.0**e for e in range(a, b + 1)]
        if len(ticks) <= 2:
            ticks = sorted({v * 10.0**e for e in range(a, b + 1) for v in (1, 2, 5)})
        return [t for t in ticks if lo <= t <= hi] or [lo, hi]
    step = (hi - lo) / 5 if hi > lo else 1.0
    return [lo + i * step for i in range(6)]


def _fmt(v):
    return f"{v:.3g}"


def line_chart(series: dict, title: str, xlabel: str, ylabel: str, logx: bool = False, logy: bool = False,
               width: int = 640, height: int = 420) -> str:
    """Render ``{label: [(x, y, err), ...]}`` as an SVG document string.

    Points with non-positive coordinates on a log axis are dropped; error bars
    are clipped to the plotting range.
    """
    pts = []
    for data in series.values():
        for x, y, e in data:
            if (logx and x <= 0) or (logy and y <= 0):
                continue
            pts.append((x, y, e))
    left, right, top, bottom = 70, 150, 40, 55
    pw, ph = width - left - right, height - top - bottom
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{left + pw / 2}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>']
    if not pts:
        out.append("</svg>")
        return "\n".join(out) + "\n"
    xs = [p[0] for p in pts]
    ylo = [p[1] - p[2] if not logy or p[1] - p[2] > 0 else p[1] for p in pts]
    yhi = [p[1] + p[2] for p in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ylo), max(yhi)
    if x0 == x1:
        x0, x1 = (x0 / 2, x1 * 2) if logx else (x0 - 1, x1 + 1)
    if y0 == y1:
        y0, y1 = (y0 / 2, y1 * 2) if logy else (y0 - 1, y1 + 1)
    if logy:
        y0, y1 = y0 / 1.2, y1 * 1.2
    else:
        pad = 0.05 * (y1 - y0)
        y0, y1 = y0 - pad, y1 + pad

    def tx(x):
        if logx:
            return left + pw * (math.log(x) - math.log(x0)) / (math.log(x1) - math.log(x0))
        return left + pw * (x - x0) / (x1 - x0)

    def ty(y):
        y = min(max(y, y0), y1)
        if logy:
            return top + ph * (1 - (math.log(y) - math.log(y0)) / (math.log(y1) - math.log(y0)))
        return top + ph * (1 - (y - y0) / (y1 - y0))

    out.append(f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>')
    for t in _ticks(x0, x1, logx):
        out.append(f'<line x1="{tx(t):.2f}" y1="{top + ph}" x2="{tx(t):.2f}" y2="{top + ph + 5}" stroke="#333"/>')
        out.append(f'<text x="{tx(t):.2f}" y="{top + ph + 18}" text-anchor="middle">{_fmt(t)}</text>')
    for t in _ticks(y0, y1, logy):
        out.append(f'<line x1="{left - 5}" y1="{ty(t):.2f}" x2="{left}" y2="{ty(t):.2f}" stroke="#333"/>')
        out.append(f'<text x="{left - 8}" y="{ty(t) + 4:.2f}" text-anchor="end">{_fmt(t)}</text>')
    out.append(f'<text x="{left + pw / 2}" y="{height - 12}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{top + ph / 2}" text-anchor="middle" '
               f'transform="rotate(-90 16 {top + ph / 2})">{escape(ylabel)}</text>')
    for idx, (label, data) in enumerate(series.items()):
        color = PALETTE[idx % len(PALETTE)]
        data = [(x, y, e) for x, y, e in sorted(data) if not ((logx and x <= 0) or (logy and y <= 0))]
        if not data:
            continue
        coords = " ".join(f"{tx(x):.2f},{ty(y):.2f}" for x, y, _ in data)
        out.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.8"/>')
        for x, y, e in data:
            lo = y - e if not logy or y - e > 0 else y0
            out.append(f'<line x1="{tx(x):.2f}" y1="{ty(lo):.2f}" x2="{tx(x):.2f}" y2="{ty(y + e):.2f}" '
                       f'stroke="{color}"/>')
            out.append(f'<circle cx="{tx(x):.2f}" cy="{ty(y):.2f}" r="3" fill="{color}"/>')
        ly = top + 14 + 18 * idx
        out.append(f'<line x1="{left + pw + 12}" y1="{ly - 4}" x2="{left + pw + 32}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 38}" y="{ly}">{escape(str(label))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"

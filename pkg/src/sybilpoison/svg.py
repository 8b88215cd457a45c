"""Minimal deterministic SVG line charts and image grids."""
from __future__ import annotations

import math
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")
DASHES = ("", "6,3", "2,2", "8,3,2,3")


def _fmt(x: float) -> str:
    return f"{x:.2f}".rstrip("0").rstrip(".")


def line_chart(series, title="", xlabel="round", ylabel="", ylim=(0.0, 1.0), width=640, height=400) -> str:
    """``series`` is a list of (label, xs, ys); None entries in ys break the line."""
    left, right, top, bottom = 60, 160, 40, 50
    pw, ph = width - left - right, height - top - bottom
    xs_all = [x for _, xs, _ in series for x in xs]
    x0, x1 = (min(xs_all), max(xs_all)) if xs_all else (0, 1)
    if x1 == x0:
        x1 = x0 + 1
    y0, y1 = ylim

    def px(x):
        return left + (x - x0) / (x1 - x0) * pw

    def py(y):
        y = min(max(y, y0), y1)
        return top + ph - (y - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.0f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>']
    for i in range(6):
        yv = y0 + (y1 - y0) * i / 5
        out.append(f'<line x1="{left}" y1="{_fmt(py(yv))}" x2="{left + pw}" y2="{_fmt(py(yv))}" stroke="#ddd"/>')
        out.append(f'<text x="{left - 6}" y="{_fmt(py(yv) + 4)}" text-anchor="end">{yv:.1f}</text>')
    nticks = min(10, int(x1 - x0))
    for i in range(nticks + 1):
        xv = x0 + (x1 - x0) * i / max(nticks, 1)
        out.append(f'<text x="{_fmt(px(xv))}" y="{top + ph + 16}" text-anchor="middle">{xv:g}</text>')
    out.append(f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
    out.append(f'<text x="{left + pw / 2:.0f}" y="{height - 10}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{top + ph / 2:.0f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {top + ph / 2:.0f})">{escape(ylabel)}</text>')
    for k, (label, xs, ys) in enumerate(series):
        color = PALETTE[k % len(PALETTE)]
        dash = DASHES[(k // len(PALETTE)) % len(DASHES)]
        dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
        run = []
        for x, y in list(zip(xs, ys)) + [(None, None)]:
            if y is None or (isinstance(y, float) and math.isnan(y)):
                if len(run) > 1:
                    pts = " ".join(f"{_fmt(px(a))},{_fmt(py(b))}" for a, b in run)
                    out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"{dash_attr}/>')
                run = []
            else:
                run.append((x, y))
        ly = top + 14 + 18 * k
        out.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 34}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="1.5"{dash_attr}/>')
        out.append(f'<text x="{left + pw + 40}" y="{ly + 4}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def image_grid(rows, labels=(), cell=3) -> str:
    """Grayscale images (2-D arrays in [0, 1]) laid out as rows of cells."""
    if not rows or not rows[0]:
        return '<svg xmlns="http://www.w3.org/2000/svg" width="1" height="1"/>\n'
    h, w = rows[0][0].shape
    pad, label_w = 4, 80
    width = label_w + len(rows[0]) * (w * cell + pad)
    height = len(rows) * (h * cell + pad)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11" shape-rendering="crispEdges">',
           f'<rect width="{width}" height="{height}" fill="white"/>']
    for r, row in enumerate(rows):
        oy = r * (h * cell + pad)
        if r < len(labels):
            out.append(f'<text x="4" y="{oy + h * cell / 2:.0f}">{escape(labels[r])}</text>')
        for c, img in enumerate(row):
            ox = label_w + c * (w * cell + pad)
            for i in range(h):
                for j in range(w):
                    g = int(round(255 * min(max(float(img[i, j]), 0.0), 1.0)))
                    out.append(f'<rect x="{ox + j * cell}" y="{oy + i * cell}" width="{cell}" '
                               f'height="{cell}" fill="rgb({g},{g},{g})"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"

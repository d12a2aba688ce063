"""Cost/performance fronts and a dependency-free SVG scatter plot."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape


def _dominates(a, b) -> bool:
    return a[0] <= b[0] and a[1] >= b[1] and (a[0] < b[0] or a[1] > b[1])


def pareto_front(points):
    """Nondominated subset of ``(cost, performance)`` pairs, sorted by cost.

    Lower cost and higher performance are better.  Exact duplicates keep a
    single representative.
    """
    pts = [(float(c), float(p)) for c, p in points]
    for c, p in pts:
        if not (math.isfinite(c) and math.isfinite(p)):
            raise ValueError(f"non-finite point ({c}, {p})")
    unique = sorted(set(pts))
    return [a for a in unique if not any(_dominates(b, a) for b in unique)]


_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"]


def scatter_svg(rows, width: int = 640, height: int = 440, title: str = "cost vs accuracy") -> str:
    """Render ``rows`` of ``{"policy", "mean_cost", "accuracy"}`` as SVG text.

    Points on the front are drawn larger with a black outline and joined by a
    step line.
    """
    rows = [r for r in rows if r.get("mean_cost") is not None and r.get("accuracy") is not None]
    pad_l, pad_r, pad_t, pad_b = 60, 150, 36, 48
    pw, ph = width - pad_l - pad_r, height - pad_t - pad_b
    xs = [float(r["mean_cost"]) for r in rows] or [0.0, 1.0]
    ys = [float(r["accuracy"]) for r in rows] or [0.0, 1.0]
    x0, x1 = 0.0, max(max(xs), 1e-9) * 1.05
    y0, y1 = min(ys), max(ys)
    if y1 - y0 < 1e-9:
        y0, y1 = y0 - 0.05, y1 + 0.05
    margin = 0.05 * (y1 - y0)
    y0, y1 = y0 - margin, y1 + margin

    def sx(v):
        return pad_l + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return pad_t + (1.0 - (v - y0) / (y1 - y0)) * ph

    front = set(pareto_front([(float(r["mean_cost"]), float(r["accuracy"])) for r in rows])) if rows else set()
    policies = sorted({str(r["policy"]) for r in rows})
    colour = {p: _PALETTE[i % len(_PALETTE)] for i, p in enumerate(policies)}

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{pad_l}" y="20" font-size="14">{escape(title)}</text>',
        f'<line x1="{pad_l}" y1="{pad_t + ph}" x2="{pad_l + pw}" y2="{pad_t + ph}" stroke="black"/>',
        f'<line x1="{pad_l}" y1="{pad_t}" x2="{pad_l}" y2="{pad_t + ph}" stroke="black"/>',
    ]
    for k in range(6):
        xv = x0 + (x1 - x0) * k / 5
        yv = y0 + (y1 - y0) * k / 5
        out.append(f'<text x="{sx(xv):.1f}" y="{pad_t + ph + 16}" text-anchor="middle">{xv:.3g}</text>')
        out.append(f'<text x="{pad_l - 6}" y="{sy(yv) + 4:.1f}" text-anchor="end">{yv:.3f}</text>')
    out.append(f'<text x="{pad_l + pw / 2}" y="{height - 8}" text-anchor="middle">mean normalized cost</text>')
    out.append(
        f'<text x="14" y="{pad_t + ph / 2}" text-anchor="middle" transform="rotate(-90 14 {pad_t + ph / 2})">'
        "accuracy</text>"
    )
    if len(front) > 1:
        ordered = sorted(front)
        path = " ".join(f"{sx(c):.1f},{sy(p):.1f}" for c, p in ordered)
        out.append(f'<polyline points="{path}" fill="none" stroke="#555" stroke-dasharray="4 3"/>')
    for r in rows:
        c, p = float(r["mean_cost"]), float(r["accuracy"])
        on = (c, p) in front
        radius = 5 if on else 3
        stroke = ' stroke="black" stroke-width="1.5"' if on else ""
        cls = "front" if on else "point"
        out.append(
            f'<circle class="{cls}" cx="{sx(c):.1f}" cy="{sy(p):.1f}" r="{radius}" '
            f'fill="{colour[str(r["policy"])]}"{stroke}/>'
        )
    for i, p in enumerate(policies):
        y = pad_t + 10 + 16 * i
        out.append(f'<circle cx="{pad_l + pw + 16}" cy="{y}" r="4" fill="{colour[p]}"/>')
        out.append(f'<text x="{pad_l + pw + 26}" y="{y + 4}">{escape(p)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"

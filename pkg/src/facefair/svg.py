"""Minimal deterministic SVG charts (scatter with frontier, grouped bars)."""

from __future__ import annotations

from xml.sax.saxutils import escape

PALETTE = ("#1b6ca8", "#d1495b", "#edae49", "#00798c", "#66a182", "#8d6a9f", "#30343f")
W, H = 480, 320
LEFT, RIGHT, TOP, BOTTOM = 60, 20, 30, 50


def _num(v: float) -> str:
    return f"{v:.2f}"


def _frame(title: str, xlabel: str, ylabel: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{LEFT}" y1="{H - BOTTOM}" x2="{W - RIGHT}" y2="{H - BOTTOM}" stroke="black"/>',
        f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{H - BOTTOM}" stroke="black"/>',
        f'<text x="{(LEFT + W - RIGHT) / 2}" y="{H - 12}" text-anchor="middle" font-size="12">'
        f'{escape(xlabel)}</text>',
        f'<text x="14" y="{(TOP + H - BOTTOM) / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {(TOP + H - BOTTOM) / 2})">{escape(ylabel)}</text>',
    ]


def _range(values, pad=0.1):
    lo, hi = min(values), max(values)
    if hi == lo:
        lo, hi = lo - 0.5 * max(abs(lo), 1e-3), hi + 0.5 * max(abs(hi), 1e-3)
    span = hi - lo
    return lo - pad * span, hi + pad * span


def _ticks(lo, hi, axis: str, n: int = 5) -> list[str]:
    out = []
    for k in range(n + 1):
        v = lo + (hi - lo) * k / n
        if axis == "x":
            x = LEFT + (W - LEFT - RIGHT) * k / n
            out.append(f'<text x="{_num(x)}" y="{H - BOTTOM + 15}" text-anchor="middle" '
                       f'font-size="10">{v:.3g}</text>')
        else:
            y = H - BOTTOM - (H - TOP - BOTTOM) * k / n
            out.append(f'<text x="{LEFT - 5}" y="{_num(y + 3)}" text-anchor="end" '
                       f'font-size="10">{v:.3g}</text>')
    return out


def scatter_with_frontier(points: dict, frontier, title: str, xlabel: str, ylabel: str) -> str:
    """``points`` maps a label to (x, y); ``frontier`` is a list of (x, y) drawn as a line."""
    xs = [p[0] for p in points.values()] or [0.0]
    ys = [p[1] for p in points.values()] or [0.0]
    x0, x1 = _range(xs)
    y0, y1 = _range(ys)

    def px(x):
        return LEFT + (x - x0) / (x1 - x0) * (W - LEFT - RIGHT)

    def py(y):
        return H - BOTTOM - (y - y0) / (y1 - y0) * (H - TOP - BOTTOM)

    parts = _frame(title, xlabel, ylabel) + _ticks(x0, x1, "x") + _ticks(y0, y1, "y")
    if len(frontier) > 1:
        path = " ".join(f"{_num(px(x))},{_num(py(y))}" for x, y in sorted(frontier))
        parts.append(f'<polyline points="{path}" fill="none" stroke="#444" stroke-dasharray="4 3"/>')
    front = {(float(x), float(y)) for x, y in frontier}
    for k, (label, (x, y)) in enumerate(points.items()):
        colour = PALETTE[k % len(PALETTE)]
        ring = ' stroke="black" stroke-width="2"' if (float(x), float(y)) in front else ""
        parts.append(f'<circle cx="{_num(px(x))}" cy="{_num(py(y))}" r="5" fill="{colour}"{ring}/>')
        parts.append(f'<text x="{_num(px(x) + 8)}" y="{_num(py(y) - 6)}" font-size="11">'
                     f'{escape(str(label))}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def grouped_bars(categories, series: dict, title: str, xlabel: str, ylabel: str) -> str:
    """One cluster per category; ``series`` maps a label to one value per category."""
    categories = list(categories)
    labels = list(series)
    top = max([v for vals in series.values() for v in vals] + [1e-9])
    y1 = top * 1.1
    plot_w = W - LEFT - RIGHT
    cluster = plot_w / max(len(categories), 1)
    bar = cluster * 0.8 / max(len(labels), 1)
    parts = _frame(title, xlabel, ylabel) + _ticks(0.0, y1, "y")
    for ci, cat in enumerate(categories):
        cx = LEFT + ci * cluster
        parts.append(f'<text x="{_num(cx + cluster / 2)}" y="{H - BOTTOM + 15}" '
                     f'text-anchor="middle" font-size="10">{escape(str(cat))}</text>')
        for si, label in enumerate(labels):
            v = series[label][ci]
            h = (v / y1) * (H - TOP - BOTTOM)
            x = cx + cluster * 0.1 + si * bar
            parts.append(f'<rect x="{_num(x)}" y="{_num(H - BOTTOM - h)}" width="{_num(bar)}" '
                         f'height="{_num(h)}" fill="{PALETTE[si % len(PALETTE)]}"/>')
    for si, label in enumerate(labels):
        y = TOP + 12 * si
        parts.append(f'<rect x="{W - RIGHT - 90}" y="{y}" width="8" height="8" '
                     f'fill="{PALETTE[si % len(PALETTE)]}"/>')
        parts.append(f'<text x="{W - RIGHT - 78}" y="{y + 8}" font-size="10">{escape(str(label))}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"

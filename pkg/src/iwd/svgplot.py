"""Dependency-free SVG emitters for score histograms and training curves.

Layout is fixed and every coordinate is formatted through one rounding
helper, so a given input always produces the same bytes.
"""
import numpy as np

WIDTH = 640
HEIGHT = 400
MARGIN = 54

BAR_FILL = "#4878a8"
LINE_STROKE = "#b04030"
AXIS = "#222222"
GRID = "#cccccc"


def _fmt(v: float) -> str:
    # fixed 2-decimal canvas coordinates keep output bytes stable
    return f"{float(v):.2f}"


def _sig(v: float) -> str:
    return f"{float(v):.4g}"


def _header(title: str) -> list:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="#ffffff"/>',
        f'<text x="{WIDTH // 2}" y="24" text-anchor="middle" '
        f'font-family="monospace" font-size="15">{title}</text>',
    ]


def _axes(xlabel: str, ylabel: str) -> list:
    x0, y0 = MARGIN, HEIGHT - MARGIN
    x1, y1 = WIDTH - MARGIN, MARGIN
    return [
        f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="{AXIS}"/>',
        f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="{AXIS}"/>',
        f'<text x="{(x0 + x1) // 2}" y="{HEIGHT - 14}" text-anchor="middle" '
        f'font-family="monospace" font-size="12">{xlabel}</text>',
        f'<text x="16" y="{(y0 + y1) // 2}" text-anchor="middle" '
        f'font-family="monospace" font-size="12" '
        f'transform="rotate(-90 16 {(y0 + y1) // 2})">{ylabel}</text>',
    ]


def _span(lo: float, hi: float) -> tuple:
    if hi <= lo:
        pad = 0.5 if lo == 0 else abs(lo) * 0.05
        return lo - pad, hi + pad
    return lo, hi


def histogram_svg(values, bins: int = 20, title: str = "score histogram",
                  xlabel: str = "score", ylabel: str = "count") -> str:
    """Bar chart of a 1-D sample; each bar carries its count as a data
    attribute so consumers can audit the binning without re-parsing paths."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("histogram needs at least one value")
    if bins < 1:
        raise ValueError("bins must be positive")
    counts, edges = np.histogram(v, bins=bins)
    x0, y0 = MARGIN, HEIGHT - MARGIN
    plot_w = WIDTH - 2 * MARGIN
    plot_h = HEIGHT - 2 * MARGIN
    peak = max(int(counts.max()), 1)
    parts = _header(title) + _axes(xlabel, ylabel)
    bar_w = plot_w / bins
    for i, c in enumerate(counts):
        h = plot_h * (int(c) / peak)
        parts.append(
            f'<rect x="{_fmt(x0 + i * bar_w)}" y="{_fmt(y0 - h)}" '
            f'width="{_fmt(bar_w)}" height="{_fmt(h)}" fill="{BAR_FILL}" '
            f'stroke="#ffffff" stroke-width="0.5" data-count="{int(c)}"/>'
        )
    parts.append(
        f'<text x="{x0}" y="{y0 + 16}" font-family="monospace" font-size="11" '
        f'text-anchor="middle">{_sig(edges[0])}</text>'
    )
    parts.append(
        f'<text x="{x0 + plot_w}" y="{y0 + 16}" font-family="monospace" '
        f'font-size="11" text-anchor="middle">{_sig(edges[-1])}</text>'
    )
    parts.append(
        f'<text x="{x0 - 6}" y="{MARGIN + 4}" font-family="monospace" '
        f'font-size="11" text-anchor="end">{peak}</text>'
    )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def line_chart_svg(ys, xs=None, title: str = "objective",
                   xlabel: str = "step", ylabel: str = "value") -> str:
    """Single polyline over an optionally explicit x grid."""
    y = np.asarray(ys, dtype=float).ravel()
    if y.size == 0:
        raise ValueError("line chart needs at least one point")
    x = np.arange(y.size, dtype=float) if xs is None else np.asarray(xs, dtype=float).ravel()
    if x.size != y.size:
        raise ValueError("xs and ys must have equal length")
    x0, y0 = MARGIN, HEIGHT - MARGIN
    plot_w = WIDTH - 2 * MARGIN
    plot_h = HEIGHT - 2 * MARGIN
    xlo, xhi = _span(float(x.min()), float(x.max()))
    ylo, yhi = _span(float(y.min()), float(y.max()))
    px = x0 + plot_w * (x - xlo) / (xhi - xlo)
    py = y0 - plot_h * (y - ylo) / (yhi - ylo)
    pts = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in zip(px, py))
    parts = _header(title) + _axes(xlabel, ylabel)
    mid = y0 - plot_h / 2
    parts.append(
        f'<line x1="{x0}" y1="{_fmt(mid)}" x2="{x0 + plot_w}" y2="{_fmt(mid)}" '
        f'stroke="{GRID}" stroke-dasharray="4 4"/>'
    )
    parts.append(
        f'<polyline points="{pts}" fill="none" stroke="{LINE_STROKE}" stroke-width="1.5"/>'
    )
    for lab, xx, yy, anchor in (
        (_sig(xlo), x0, y0 + 16, "middle"),
        (_sig(xhi), x0 + plot_w, y0 + 16, "middle"),
        (_sig(ylo), x0 - 6, y0 + 4, "end"),
        (_sig(yhi), x0 - 6, MARGIN + 4, "end"),
    ):
        parts.append(
            f'<text x="{_fmt(xx)}" y="{_fmt(yy)}" font-family="monospace" '
            f'font-size="11" text-anchor="{anchor}">{lab}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_svg(svg: str, path) -> None:
    with open(path, "w") as fh:
        fh.write(svg)

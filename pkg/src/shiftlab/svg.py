"""Minimal deterministic SVG charts.

Pure text emission: the same inputs always produce byte-identical files,
which keeps report re-runs reproducible.  Only the two chart kinds the
report needs are provided (lines with optional shaded bands, grouped bars).
"""

from __future__ import annotations

from dataclasses import dataclass

__all__ = ["Series", "line_chart", "bar_chart"]

PALETTE = ("#1f6fb2", "#d9542b", "#3c8c4d", "#8056a7", "#b0852f", "#5a5a5a")

W, H = 640, 400
ML, MR, MT, MB = 64, 20, 40, 52


@dataclass
class Series:
    label: str
    points: list  # [(x, y)] mean curve, sorted by x
    band: list | None = None  # [(x, lo, hi)] shaded region


def _esc(s: str) -> str:
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _f(x: float) -> str:
    return f"{x:.2f}"


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    step = (hi - lo) / (n - 1)
    return [lo + i * step for i in range(n)]


def _span(values) -> tuple[float, float]:
    lo, hi = min(values), max(values)
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


class _Canvas:
    def __init__(self, title: str, xlabel: str, ylabel: str, footnote: str):
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
            f"<desc>{_esc(footnote)}</desc>" if footnote else "",
            f'<rect width="{W}" height="{H}" fill="#ffffff"/>',
            f'<text x="{W / 2:.0f}" y="22" font-family="monospace" font-size="14" text-anchor="middle">{_esc(title)}</text>',
            f'<text x="{W / 2:.0f}" y="{H - 8}" font-family="monospace" font-size="12" text-anchor="middle">{_esc(xlabel)}</text>',
            f'<text x="16" y="{H / 2:.0f}" font-family="monospace" font-size="12" text-anchor="middle" transform="rotate(-90 16 {H / 2:.0f})">{_esc(ylabel)}</text>',
        ]
        if footnote:
            self.parts.append(
                f'<text x="{ML}" y="{H - 24}" font-family="monospace" font-size="9" fill="#888888">{_esc(footnote)}</text>'
            )

    def add(self, fragment: str) -> None:
        self.parts.append(fragment)

    def render(self) -> str:
        self.parts.append("</svg>")
        return "\n".join(p for p in self.parts if p) + "\n"


def _scales(xs, ys):
    xlo, xhi = _span(xs)
    ylo, yhi = _span(ys)

    def sx(x):
        return ML + (x - xlo) / (xhi - xlo) * (W - ML - MR)

    def sy(y):
        return H - MB - (y - ylo) / (yhi - ylo) * (H - MT - MB)

    return sx, sy, (xlo, xhi), (ylo, yhi)


def _axes(c: _Canvas, sx, sy, xr, yr):
    x0, y0 = ML, H - MB
    c.add(f'<line x1="{x0}" y1="{MT}" x2="{x0}" y2="{y0}" stroke="#333333"/>')
    c.add(f'<line x1="{x0}" y1="{y0}" x2="{W - MR}" y2="{y0}" stroke="#333333"/>')
    for t in _ticks(*xr):
        px = sx(t)
        c.add(f'<line x1="{_f(px)}" y1="{y0}" x2="{_f(px)}" y2="{y0 + 4}" stroke="#333333"/>')
        c.add(
            f'<text x="{_f(px)}" y="{y0 + 16}" font-family="monospace" font-size="10" text-anchor="middle">{t:.3g}</text>'
        )
    for t in _ticks(*yr):
        py = sy(t)
        c.add(f'<line x1="{x0 - 4}" y1="{_f(py)}" x2="{x0}" y2="{_f(py)}" stroke="#333333"/>')
        c.add(f'<line x1="{x0}" y1="{_f(py)}" x2="{W - MR}" y2="{_f(py)}" stroke="#eeeeee"/>')
        c.add(
            f'<text x="{x0 - 8}" y="{_f(py + 3)}" font-family="monospace" font-size="10" text-anchor="end">{t:.3g}</text>'
        )


def line_chart(
    title: str,
    series: list[Series],
    xlabel: str = "",
    ylabel: str = "",
    marker_x: float | None = None,
    marker_label: str = "",
    footnote: str = "",
) -> str:
    """Lines with optional shaded bands and an optional dashed vertical
    marker (e.g. the matching fraction)."""
    if not series or any(not s.points for s in series):
        raise ValueError("every series needs at least one point")
    xs = [x for s in series for x, _ in s.points]
    ys = [y for s in series for _, y in s.points]
    for s in series:
        for _, lo, hi in s.band or []:
            ys.extend((lo, hi))
    if marker_x is not None:
        xs.append(marker_x)
    c = _Canvas(title, xlabel, ylabel, footnote)
    sx, sy, xr, yr = _scales(xs, ys)
    _axes(c, sx, sy, xr, yr)
    for i, s in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        if s.band:
            upper = [(sx(x), sy(hi)) for x, _, hi in s.band]
            lower = [(sx(x), sy(lo)) for x, lo, _ in reversed(s.band)]
            pts = " ".join(f"{_f(px)},{_f(py)}" for px, py in upper + lower)
            c.add(f'<polygon points="{pts}" fill="{color}" fill-opacity="0.15" stroke="none"/>')
        pts = " ".join(f"{_f(sx(x))},{_f(sy(y))}" for x, y in s.points)
        c.add(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, y in s.points:
            c.add(f'<circle cx="{_f(sx(x))}" cy="{_f(sy(y))}" r="3" fill="{color}"/>')
        ly = MT + 14 + 14 * i
        c.add(f'<rect x="{W - MR - 150}" y="{ly - 8}" width="10" height="10" fill="{color}"/>')
        c.add(
            f'<text x="{W - MR - 135}" y="{ly}" font-family="monospace" font-size="11">{_esc(s.label)}</text>'
        )
    if marker_x is not None:
        px = sx(marker_x)
        c.add(
            f'<line x1="{_f(px)}" y1="{MT}" x2="{_f(px)}" y2="{H - MB}" stroke="#cc0000" '
            f'stroke-width="1.5" stroke-dasharray="5,4"/>'
        )
        if marker_label:
            c.add(
                f'<text x="{_f(px + 5)}" y="{MT + 12}" font-family="monospace" font-size="11" '
                f'fill="#cc0000">{_esc(marker_label)}</text>'
            )
    return c.render()


def bar_chart(
    title: str,
    categories: list[str],
    groups: list[tuple[str, list[float]]],
    ylabel: str = "",
    footnote: str = "",
) -> str:
    """Grouped vertical bars: one cluster per category, one bar per group."""
    if not categories or not groups:
        raise ValueError("bar_chart needs categories and groups")
    for label, values in groups:
        if len(values) != len(categories):
            raise ValueError(f"group '{label}' has {len(values)} values for {len(categories)} categories")
    ys = [v for _, values in groups for v in values]
    ylo, yhi = min(0.0, min(ys)), max(ys)
    if yhi == ylo:
        yhi = ylo + 1.0
    yhi += 0.08 * (yhi - ylo)
    c = _Canvas(title, "", ylabel, footnote)

    def sy(y):
        return H - MB - (y - ylo) / (yhi - ylo) * (H - MT - MB)

    x0, y0 = ML, H - MB
    c.add(f'<line x1="{x0}" y1="{MT}" x2="{x0}" y2="{y0}" stroke="#333333"/>')
    c.add(f'<line x1="{x0}" y1="{y0}" x2="{W - MR}" y2="{y0}" stroke="#333333"/>')
    for t in _ticks(ylo, yhi):
        py = sy(t)
        c.add(f'<line x1="{x0 - 4}" y1="{_f(py)}" x2="{x0}" y2="{_f(py)}" stroke="#333333"/>')
        c.add(f'<text x="{x0 - 8}" y="{_f(py + 3)}" font-family="monospace" font-size="10" text-anchor="end">{t:.3g}</text>')
    span = (W - ML - MR) / len(categories)
    bar_w = 0.8 * span / len(groups)
    for ci, cat in enumerate(categories):
        cx = ML + (ci + 0.5) * span
        c.add(
            f'<text x="{_f(cx)}" y="{y0 + 16}" font-family="monospace" font-size="10" text-anchor="middle">{_esc(cat)}</text>'
        )
        for gi, (label, values) in enumerate(groups):
            color = PALETTE[gi % len(PALETTE)]
            bx = cx - 0.4 * span + gi * bar_w
            top = sy(values[ci])
            c.add(
                f'<rect x="{_f(bx)}" y="{_f(top)}" width="{_f(bar_w)}" height="{_f(y0 - top)}" fill="{color}"/>'
            )
    for gi, (label, _) in enumerate(groups):
        color = PALETTE[gi % len(PALETTE)]
        ly = MT + 14 + 14 * gi
        c.add(f'<rect x="{W - MR - 150}" y="{ly - 8}" width="10" height="10" fill="{color}"/>')
        c.add(f'<text x="{W - MR - 135}" y="{ly}" font-family="monospace" font-size="11">{_esc(label)}</text>')
    return c.render()

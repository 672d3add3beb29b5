"""Minimal SVG line/scatter charts written as plain text."""

from __future__ import annotations

from typing import List, Optional, Sequence, Tuple
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _fmt(v: float) -> str:
    return f"{v:.2f}".rstrip("0").rstrip(".")


def _nice_ticks(lo: float, hi: float, n: int = 5) -> List[float]:
    if hi <= lo:
        return [lo]
    step = (hi - lo) / n
    mag = 10 ** int(f"{step:e}".split("e")[1])
    for m in (1, 2, 2.5, 5, 10):
        if step <= m * mag:
            step = m * mag
            break
    start = step * int(lo / step)
    ticks = []
    t = start
    while t <= hi + 1e-9:
        if t >= lo - 1e-9:
            ticks.append(round(t, 10))
        t += step
    return ticks


class Chart:
    """Axes with data-to-pixel mapping; series are added, then rendered."""

    def __init__(self, title: str, xlabel: str, ylabel: str, width: int = 640, height: int = 420,
                 xlim: Optional[Tuple[float, float]] = None, ylim: Optional[Tuple[float, float]] = None):
        self.title, self.xlabel, self.ylabel = title, xlabel, ylabel
        self.width, self.height = width, height
        self.margin = (60, 20, 40, 55)  # left, right, top, bottom
        self.xlim, self.ylim = xlim, ylim
        self.items: List[str] = []
        self.legend: List[Tuple[str, str]] = []
        self.notes: List[str] = []
        self._points: List[Tuple[float, float]] = []

    def _limits(self):
        xs = [p[0] for p in self._points] or [0.0, 1.0]
        ys = [p[1] for p in self._points] or [0.0, 1.0]
        xlim = self.xlim or (min(xs), max(xs) if max(xs) > min(xs) else min(xs) + 1)
        ylim = self.ylim or (min(ys), max(ys) if max(ys) > min(ys) else min(ys) + 1)
        return xlim, ylim

    def _px(self, x, y, xlim, ylim):
        l, r, t, b = self.margin
        pw, ph = self.width - l - r, self.height - t - b
        return (l + (x - xlim[0]) / (xlim[1] - xlim[0]) * pw,
                t + ph - (y - ylim[0]) / (ylim[1] - ylim[0]) * ph)

    def line(self, xs, ys, label: str, color: str, lower=None, upper=None):
        self._points += list(zip(xs, ys))
        if lower is not None:
            self._points += list(zip(xs, lower)) + list(zip(xs, upper))
        self.items.append(("line", list(xs), list(ys), color, lower, upper))
        self.legend.append((label, color))

    def scatter(self, xs, ys, label: str, color: str):
        self._points += list(zip(xs, ys))
        self.items.append(("scatter", list(xs), list(ys), color, None, None))
        self.legend.append((label, color))

    def hline(self, y: float, label: str, color: str = "#555555"):
        self._points.append((self._points[0][0] if self._points else 0.0, y))
        self.items.append(("hline", [], [y], color, None, None))
        self.legend.append((label, color))

    def note(self, text: str):
        self.notes.append(text)

    def render(self) -> str:
        xlim, ylim = self._limits()
        l, r, t, b = self.margin
        out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" height="{self.height}" '
               f'viewBox="0 0 {self.width} {self.height}" font-family="sans-serif" font-size="12">',
               f'<rect width="{self.width}" height="{self.height}" fill="white"/>',
               f'<text x="{self.width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(self.title)}</text>']
        x0, y0 = self._px(xlim[0], ylim[0], xlim, ylim)
        x1, y1 = self._px(xlim[1], ylim[1], xlim, ylim)
        out.append(f'<rect x="{x0:.1f}" y="{y1:.1f}" width="{x1 - x0:.1f}" height="{y0 - y1:.1f}" '
                   f'fill="none" stroke="black"/>')
        for tx in _nice_ticks(*xlim):
            px, _ = self._px(tx, ylim[0], xlim, ylim)
            out.append(f'<line x1="{px:.1f}" y1="{y0:.1f}" x2="{px:.1f}" y2="{y0 + 4:.1f}" stroke="black"/>')
            out.append(f'<text x="{px:.1f}" y="{y0 + 16:.1f}" text-anchor="middle">{_fmt(tx)}</text>')
        for ty in _nice_ticks(*ylim):
            _, py = self._px(xlim[0], ty, xlim, ylim)
            out.append(f'<line x1="{x0 - 4:.1f}" y1="{py:.1f}" x2="{x0:.1f}" y2="{py:.1f}" stroke="black"/>')
            out.append(f'<text x="{x0 - 6:.1f}" y="{py + 4:.1f}" text-anchor="end">{_fmt(ty)}</text>')
        out.append(f'<text x="{(x0 + x1) / 2:.1f}" y="{self.height - 12}" text-anchor="middle">{escape(self.xlabel)}</text>')
        out.append(f'<text x="16" y="{(y0 + y1) / 2:.1f}" text-anchor="middle" '
                   f'transform="rotate(-90 16 {(y0 + y1) / 2:.1f})">{escape(self.ylabel)}</text>')
        for kind, xs, ys, color, lower, upper in self.items:
            if kind == "line":
                if lower is not None:
                    pts = [self._px(x, u, xlim, ylim) for x, u in zip(xs, upper)]
                    pts += [self._px(x, lo, xlim, ylim) for x, lo in reversed(list(zip(xs, lower)))]
                    poly = " ".join(f"{px:.1f},{py:.1f}" for px, py in pts)
                    out.append(f'<polygon class="band" points="{poly}" fill="{color}" fill-opacity="0.18" stroke="none"/>')
                pts = " ".join("{:.1f},{:.1f}".format(*self._px(x, y, xlim, ylim)) for x, y in zip(xs, ys))
                out.append(f'<polyline class="series" points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
            elif kind == "scatter":
                for x, y in zip(xs, ys):
                    px, py = self._px(x, y, xlim, ylim)
                    out.append(f'<circle cx="{px:.1f}" cy="{py:.1f}" r="2.5" fill="{color}" fill-opacity="0.6"/>')
            else:
                _, py = self._px(xlim[0], ys[0], xlim, ylim)
                out.append(f'<line x1="{x0:.1f}" y1="{py:.1f}" x2="{x1:.1f}" y2="{py:.1f}" stroke="{color}" '
                           f'stroke-dasharray="6 4"/>')
        for i, (label, color) in enumerate(self.legend):
            ly = y1 + 14 + 16 * i
            out.append(f'<rect x="{x1 - 150:.1f}" y="{ly - 9:.1f}" width="10" height="10" fill="{color}"/>')
            out.append(f'<text x="{x1 - 135:.1f}" y="{ly:.1f}">{escape(label)}</text>')
        for i, text in enumerate(self.notes):
            out.append(f'<text class="note" x="{x0 + 8:.1f}" y="{y1 + 16 + 16 * i:.1f}">{escape(text)}</text>')
        out.append("</svg>")
        return "\n".join(out) + "\n"

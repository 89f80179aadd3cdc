"""Deterministic SVG rendering of vulnerability planes and metric curves.

Output is built from fixed-precision strings only, so identical input
gives byte-identical documents.
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
           "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")

CURVE_KINDS = ("exposure", "transition", "entropy", "histogram", "generic")

_W, _H = 480, 400
_L, _R, _T, _B = 60, 20, 40, 50  # plot margins


def _f(x: float) -> str:
    return f"{x:.2f}"


class _Canvas:
    def __init__(self, width: int, height: int):
        self.width, self.height = width, height
        self.parts: list[str] = []

    def add(self, s: str) -> None:
        self.parts.append(s)

    def line(self, x1, y1, x2, y2, stroke="#000", width=1.0, dash=None):
        d = f' stroke-dasharray="{dash}"' if dash else ""
        self.add(f'<line x1="{_f(x1)}" y1="{_f(y1)}" x2="{_f(x2)}" y2="{_f(y2)}" '
                 f'stroke="{stroke}" stroke-width="{_f(width)}"{d}/>')

    def text(self, x, y, s, size=12, anchor="middle", rotate=None):
        r = f' transform="rotate({rotate} {_f(x)} {_f(y)})"' if rotate is not None else ""
        self.add(f'<text x="{_f(x)}" y="{_f(y)}" font-family="sans-serif" '
                 f'font-size="{size}" text-anchor="{anchor}"{r}>{escape(str(s))}</text>')

    def polyline(self, pts, stroke, width=1.5, cls=None):
        c = f' class="{cls}"' if cls else ""
        coords = " ".join(f"{_f(x)},{_f(y)}" for x, y in pts)
        self.add(f'<polyline{c} points="{coords}" fill="none" stroke="{stroke}" '
                 f'stroke-width="{_f(width)}"/>')

    def rect(self, x, y, w, h, fill, cls=None, opacity=1.0):
        c = f' class="{cls}"' if cls else ""
        self.add(f'<rect{c} x="{_f(x)}" y="{_f(y)}" width="{_f(w)}" height="{_f(h)}" '
                 f'fill="{fill}" fill-opacity="{_f(opacity)}"/>')

    def render(self) -> str:
        head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" '
                f'height="{self.height}" viewBox="0 0 {self.width} {self.height}">')
        return "\n".join([head, '<rect width="100%" height="100%" fill="#fff"/>',
                          *self.parts, "</svg>"]) + "\n"


class _Axes:
    """Maps data coordinates to a pixel box inside a canvas."""

    def __init__(self, canvas: _Canvas, box, xlim, ylim):
        self.c = canvas
        self.x0, self.y0, self.w, self.h = box
        self.xlim, self.ylim = xlim, ylim

    def px(self, x):
        lo, hi = self.xlim
        return self.x0 + (x - lo) / (hi - lo) * self.w

    def py(self, y):
        lo, hi = self.ylim
        return self.y0 + self.h - (y - lo) / (hi - lo) * self.h

    def frame(self, xlabel, ylabel, n_ticks=5):
        c = self.c
        c.rect(self.x0, self.y0, self.w, self.h, "#fafafa")
        c.line(self.x0, self.y0 + self.h, self.x0 + self.w, self.y0 + self.h)
        c.line(self.x0, self.y0, self.x0, self.y0 + self.h)
        for i in range(n_ticks + 1):
            xv = self.xlim[0] + (self.xlim[1] - self.xlim[0]) * i / n_ticks
            yv = self.ylim[0] + (self.ylim[1] - self.ylim[0]) * i / n_ticks
            x, y = self.px(xv), self.py(yv)
            c.line(x, self.y0 + self.h, x, self.y0 + self.h + 4)
            c.text(x, self.y0 + self.h + 16, _tick(xv), size=10)
            c.line(self.x0 - 4, y, self.x0, y)
            c.text(self.x0 - 6, y + 3, _tick(yv), size=10, anchor="end")
        c.text(self.x0 + self.w / 2, self.y0 + self.h + 34, xlabel)
        c.text(self.x0 - 42, self.y0 + self.h / 2, ylabel, rotate=-90)


def _tick(v: float) -> str:
    if v == int(v) and abs(v) >= 1:
        return str(int(v))
    return f"{v:.2g}" if abs(v) < 0.01 and v != 0 else f"{v:.2f}"


# Plane ----------------------------------------------------------------------


def render_plane(fpr, tpr, trajectories: Sequence | None = None,
                 histograms: bool = False, title: str = "", bins: int = 20) -> str:
    """Scatter of (FPR, TPR) states over the unit square.

    ``trajectories`` is a sequence of (sample_id, fpr_series, tpr_series)
    drawn as polylines. With ``histograms`` the marginal densities of both
    coordinates are drawn along the top and right edges.
    """
    fpr = np.asarray(fpr, dtype=float)
    tpr = np.asarray(tpr, dtype=float)
    if fpr.shape != tpr.shape or fpr.ndim != 1:
        raise ValueError("fpr and tpr must be equal-length vectors")
    extra = 60 if histograms else 0
    canvas = _Canvas(_W + extra, _H + extra)
    top = _T + extra
    side = min(_W - _L - _R, _H - _T - _B)
    ax = _Axes(canvas, (_L, top, side, side), (0.0, 1.0), (0.0, 1.0))
    ax.frame("FPR", "TPR")
    if title:
        canvas.text(_L + side / 2, 20, title, size=14)
    canvas.add('<g class="diagonal">')
    canvas.line(ax.px(0), ax.py(0), ax.px(1), ax.py(1), stroke="#888", dash="4,3")
    canvas.add("</g>")

    for k, (sid, fs, ts) in enumerate(trajectories or ()):
        pts = [(ax.px(f), ax.py(t)) for f, t in zip(fs, ts)]
        canvas.add(f'<g class="trajectory" data-sample="{int(sid)}">')
        canvas.polyline(pts, PALETTE[k % len(PALETTE)], width=1.0)
        canvas.add("</g>")

    canvas.add('<g class="markers">')
    for f, t in zip(fpr, tpr):
        canvas.add(f'<circle class="marker" cx="{_f(ax.px(f))}" cy="{_f(ax.py(t))}" '
                   f'r="2.00" fill="#1f77b4" fill-opacity="0.50"/>')
    canvas.add("</g>")

    if histograms and len(fpr):
        edges = np.linspace(0.0, 1.0, bins + 1)
        hx, _ = np.histogram(np.clip(fpr, 0, 1), edges)
        hy, _ = np.histogram(np.clip(tpr, 0, 1), edges)
        peak = max(hx.max(), hy.max(), 1)
        canvas.add('<g class="histogram" data-axis="fpr">')
        for i, n in enumerate(hx):
            h = n / peak * (extra - 10)
            canvas.rect(ax.px(edges[i]), top - h - 4, side / bins, h, "#999")
        canvas.add("</g>")
        canvas.add('<g class="histogram" data-axis="tpr">')
        for i, n in enumerate(hy):
            w = n / peak * (extra - 10)
            canvas.rect(_L + side + 4, ax.py(edges[i + 1]), w, side / bins, "#999")
        canvas.add("</g>")
    return canvas.render()


# Curves ---------------------------------------------------------------------


def _default_range(kind: str, values: np.ndarray) -> tuple[float, float]:
    if kind in ("exposure", "transition"):
        return 0.0, 1.0
    finite = values[np.isfinite(values)]
    if not len(finite):
        return 0.0, 1.0
    lo, hi = float(finite.min()), float(finite.max())
    if kind in ("entropy", "histogram"):
        lo = min(lo, 0.0)
    if hi - lo < 1e-12:
        pad = max(abs(hi), 1.0) * 0.1
        return lo - pad, hi + pad
    pad = (hi - lo) * 0.05
    return lo - pad if lo < 0 else lo, hi + pad


def render_curves(series: Mapping, kind: str = "generic", y_range=None,
                  xlabel: str = "epoch", ylabel: str = "", title: str = "",
                  warnings: list | None = None, bins: int = 20) -> str:
    """Line chart of labelled (x, y) series, or grouped histograms.

    For ``kind="histogram"`` each value of ``series`` is a flat sample of
    values and the bars of each group sit side by side in shared bins.
    Points outside ``y_range`` are clipped to the plot edge; one message
    per clipped series is appended to ``warnings``.
    """
    if kind not in CURVE_KINDS:
        raise ValueError(f"unknown curve kind {kind!r}")
    if not series:
        raise ValueError("no series to plot")
    if kind == "histogram":
        return _render_histograms(series, xlabel, title, bins)

    data = {str(k): (np.asarray(x, float), np.asarray(y, float)) for k, (x, y) in series.items()}
    xs = np.concatenate([x for x, _ in data.values()])
    ys = np.concatenate([y for _, y in data.values()])
    if not len(xs):
        raise ValueError("series are empty")
    lo, hi = y_range if y_range is not None else _default_range(kind, ys)
    xlo, xhi = float(xs.min()), float(xs.max())
    if xhi == xlo:
        xlo, xhi = xlo - 1, xhi + 1
    canvas = _Canvas(_W, _H)
    ax = _Axes(canvas, (_L, _T, _W - _L - _R - 100, _H - _T - _B), (xlo, xhi), (lo, hi))
    ax.frame(xlabel, ylabel or kind)
    if title:
        canvas.text(_W / 2, 20, title, size=14)

    for k, (label, (x, y)) in enumerate(data.items()):
        colour = PALETTE[k % len(PALETTE)]
        ok = np.isfinite(y)
        clipped = ok & ((y < lo) | (y > hi))
        if np.any(clipped) and warnings is not None:
            warnings.append(f"{title or kind}: {int(clipped.sum())} point(s) of "
                            f"'{label}' clipped to [{lo:g}, {hi:g}]")
        yc = np.clip(y, lo, hi)
        canvas.add(f'<g class="series" data-label="{escape(label)}">')
        run: list = []
        for xi, yi, good in zip(x, yc, ok):
            if good:
                run.append((ax.px(xi), ax.py(yi)))
            elif run:
                canvas.polyline(run, colour)
                run = []
        if run:
            canvas.polyline(run, colour)
        canvas.add("</g>")
        ly = _T + 14 + 18 * k
        canvas.line(_W - 110, ly - 4, _W - 92, ly - 4, stroke=colour, width=2)
        canvas.text(_W - 88, ly, label, size=11, anchor="start")
    return canvas.render()


def _render_histograms(groups: Mapping, xlabel: str, title: str, bins: int) -> str:
    data = {str(k): np.asarray(v, float) for k, v in groups.items()}
    allv = np.concatenate([v[np.isfinite(v)] for v in data.values()])
    lo, hi = (float(allv.min()), float(allv.max())) if len(allv) else (0.0, 1.0)
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    counts = {k: np.histogram(v[np.isfinite(v)], edges)[0] / max(len(v), 1)
              for k, v in data.items()}
    peak = max((c.max() for c in counts.values()), default=1.0) or 1.0
    canvas = _Canvas(_W, _H)
    ax = _Axes(canvas, (_L, _T, _W - _L - _R - 100, _H - _T - _B), (lo, hi), (0.0, peak * 1.05))
    ax.frame(xlabel, "fraction")
    if title:
        canvas.text(_W / 2, 20, title, size=14)
    width = (edges[1] - edges[0]) / len(counts)
    for k, (label, c) in enumerate(counts.items()):
        colour = PALETTE[k % len(PALETTE)]
        canvas.add(f'<g class="series" data-label="{escape(label)}">')
        for i, frac in enumerate(c):
            x = ax.px(edges[i] + k * width)
            canvas.rect(x, ax.py(frac), ax.px(edges[i] + (k + 1) * width) - x,
                        ax.py(0) - ax.py(frac), colour, opacity=0.8)
        canvas.add("</g>")
        ly = _T + 14 + 18 * k
        canvas.rect(_W - 110, ly - 9, 14, 10, colour)
        canvas.text(_W - 90, ly, label, size=11, anchor="start")
    return canvas.render()

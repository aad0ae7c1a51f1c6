"""Minimal SVG writers: heatmaps, contours, quivers and line plots."""

from __future__ import annotations

from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .grid import GridField

__all__ = ["Figure", "critic_figure", "line_plot", "contour_segments"]


def _f(v: float) -> str:
    return f"{v:.4g}"


def _diverging(t: float) -> str:
    """Blue (t=-1) through white to red (t=+1)."""
    t = float(np.clip(t, -1.0, 1.0))
    if t >= 0:
        r, g, b = 255, int(255 * (1 - t)), int(255 * (1 - t))
    else:
        r, g, b = int(255 * (1 + t)), int(255 * (1 + t)), 255
    return f"#{r:02x}{g:02x}{b:02x}"


class Figure:
    """Single-panel SVG canvas with a data-to-pixel mapping."""

    def __init__(self, xlim, ylim, width: int = 480, height: int = 480, margin: int = 40, title: str = ""):
        self.xlim, self.ylim = tuple(map(float, xlim)), tuple(map(float, ylim))
        self.width, self.height, self.margin = width, height, margin
        self.items: list[str] = []
        self.title = title

    def px(self, x, y) -> tuple[float, float]:
        (x0, x1), (y0, y1) = self.xlim, self.ylim
        w = self.width - 2 * self.margin
        h = self.height - 2 * self.margin
        return self.margin + (x - x0) / (x1 - x0) * w, self.height - self.margin - (y - y0) / (y1 - y0) * h

    def rect(self, x0, y0, x1, y1, fill: str, cls: str = "") -> None:
        (a, b), (c, d) = self.px(x0, y1), self.px(x1, y0)
        attr = f' class="{cls}"' if cls else ""
        self.items.append(f'<rect{attr} x="{_f(a)}" y="{_f(b)}" width="{_f(c - a)}" height="{_f(d - b)}" '
                          f'fill="{fill}" stroke="none"/>')

    def polyline(self, xs, ys, stroke="#000", width=1.0, cls: str = "") -> None:
        pts = " ".join(f"{_f(a)},{_f(b)}" for a, b in (self.px(x, y) for x, y in zip(xs, ys)))
        attr = f' class="{cls}"' if cls else ""
        self.items.append(f'<polyline{attr} points="{pts}" fill="none" stroke="{stroke}" stroke-width="{width}"/>')

    def segment(self, x0, y0, x1, y1, stroke="#000", width=1.0, cls: str = "") -> None:
        (a, b), (c, d) = self.px(x0, y0), self.px(x1, y1)
        attr = f' class="{cls}"' if cls else ""
        self.items.append(f'<line{attr} x1="{_f(a)}" y1="{_f(b)}" x2="{_f(c)}" y2="{_f(d)}" '
                          f'stroke="{stroke}" stroke-width="{width}"/>')

    def marker(self, x, y, label: str, color="#000") -> None:
        a, b = self.px(x, y)
        self.items.append(f'<circle cx="{_f(a)}" cy="{_f(b)}" r="4" fill="{color}"/>')
        self.items.append(f'<text x="{_f(a + 6)}" y="{_f(b - 6)}" font-size="12">{escape(label)}</text>')

    def text(self, x_px: float, y_px: float, s: str, size: int = 12) -> None:
        self.items.append(f'<text x="{_f(x_px)}" y="{_f(y_px)}" font-size="{size}">{escape(s)}</text>')

    def axes(self) -> None:
        m, w, h = self.margin, self.width, self.height
        self.items.append(f'<rect x="{m}" y="{m}" width="{w - 2 * m}" height="{h - 2 * m}" '
                          f'fill="none" stroke="#000"/>')
        (x0, x1), (y0, y1) = self.xlim, self.ylim
        self.text(m, h - m + 16, _f(x0))
        self.text(w - m - 20, h - m + 16, _f(x1))
        self.text(4, h - m, _f(y0))
        self.text(4, m + 10, _f(y1))
        if self.title:
            self.text(m, m - 12, self.title, size=14)

    def to_string(self) -> str:
        head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" height="{self.height}" '
                f'viewBox="0 0 {self.width} {self.height}">')
        return "\n".join([head, '<rect width="100%" height="100%" fill="#fff"/>', *self.items, "</svg>"]) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_string())


def contour_segments(x: np.ndarray, y: np.ndarray, z: np.ndarray, level: float):
    """Marching-squares segments of ``z = level`` on the grid ``z[i, j] = f(x[i], y[j])``."""
    segs = []
    above = z > level
    cells = above[:-1, :-1].astype(int) + above[1:, :-1] * 2 + above[1:, 1:] * 4 + above[:-1, 1:] * 8
    for i, j in zip(*np.nonzero((cells != 0) & (cells != 15))):
        corners = [(i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1)]
        pts = []
        for k in range(4):
            a, b = corners[k], corners[(k + 1) % 4]
            za, zb = z[a], z[b]
            if (za > level) != (zb > level):
                t = (level - za) / (zb - za)
                pts.append((x[a[0]] + t * (x[b[0]] - x[a[0]]), y[a[1]] + t * (y[b[1]] - y[a[1]])))
        for k in range(0, len(pts) - 1, 2):
            segs.append((pts[k], pts[k + 1]))
    return segs


def critic_figure(f: GridField, grad: GridField | None = None, markers: Sequence[tuple] = (),
                  title: str = "", cells: int = 96, arrows: int = 20, levels: int = 7) -> Figure:
    """Heatmap of a 2-D scalar field with contours and an optional quiver of `grad`."""
    if f.grid.dim != 2 or f.is_vector:
        raise ValueError("critic_figure needs a scalar 2-D field")
    x, y = f.grid.axes
    z = f.values
    fig = Figure((x[0], x[-1]), (y[0], y[-1]), title=title)
    scale = float(np.max(np.abs(z))) or 1.0
    # coarse heatmap: one rect per block of nodes
    bi = np.linspace(0, len(x) - 1, cells + 1).astype(int)
    bj = np.linspace(0, len(y) - 1, cells + 1).astype(int)
    for a in range(cells):
        for b in range(cells):
            v = z[bi[a] : bi[a + 1] + 1, bj[b] : bj[b + 1] + 1].mean() / scale
            fig.rect(x[bi[a]], y[bj[b]], x[bi[a + 1]], y[bj[b + 1]], _diverging(v), cls="heat")
    for lv in np.linspace(-scale, scale, levels + 2)[1:-1]:
        color = "#444" if abs(lv) < 1e-12 * scale else ("#800" if lv > 0 else "#008")
        for (p0, p1) in contour_segments(x, y, z, lv):
            fig.segment(p0[0], p0[1], p1[0], p1[1], stroke=color, width=0.8, cls="contour")
    if grad is not None:
        g = grad.values
        ii = np.linspace(0, len(x) - 1, arrows + 2).astype(int)[1:-1]
        jj = np.linspace(0, len(y) - 1, arrows + 2).astype(int)[1:-1]
        mags = np.linalg.norm(g[np.ix_(ii, jj)], axis=-1)
        gmax = float(mags.max()) or 1.0
        step = 0.9 * min(x[-1] - x[0], y[-1] - y[0]) / (arrows + 1)
        for a in ii:
            for b in jj:
                u = g[a, b] / gmax * step
                if np.hypot(*u) < 1e-3 * step:
                    continue
                fig.segment(x[a], y[b], x[a] + u[0], y[b] + u[1], stroke="#000", width=0.8, cls="quiver")
    for mx, my, label in markers:
        fig.marker(mx, my, label)
    fig.axes()
    return fig


def line_plot(series: dict[str, tuple[Sequence[float], Sequence[float]]], title: str = "",
              logy: bool = False) -> Figure:
    """Polyline per named series ``name -> (xs, ys)``."""
    xs_all = np.concatenate([np.asarray(v[0], float) for v in series.values()])
    ys_all = np.concatenate([np.asarray(v[1], float) for v in series.values()])
    if logy:
        ys_all = np.log10(np.maximum(ys_all, 1e-300))
    x0, x1 = float(xs_all.min()), float(xs_all.max())
    y0, y1 = float(ys_all.min()), float(ys_all.max())
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    fig = Figure((x0, x1), (y0, y1), width=560, height=360, title=title)
    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    for k, (name, (xs, ys)) in enumerate(series.items()):
        ys = np.asarray(ys, float)
        if logy:
            ys = np.log10(np.maximum(ys, 1e-300))
        color = palette[k % len(palette)]
        fig.polyline(xs, ys, stroke=color, width=1.5)
        fig.text(fig.width - fig.margin - 140, fig.margin + 16 * (k + 1), name)
        fig.items.append(f'<rect x="{fig.width - fig.margin - 156}" y="{fig.margin + 16 * k + 6}" '
                         f'width="10" height="10" fill="{color}"/>')
    fig.axes()
    return fig

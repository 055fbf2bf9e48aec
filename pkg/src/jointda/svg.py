"""Minimal SVG charts: line plots and 2-D scatter over rasterized regions."""

from __future__ import annotations

from dataclasses import dataclass
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
REGION_FILL = ("#dbe8f5", "#f7dada", "#dcefdc", "#e9e0f2", "#fde6d0", "#eadfdb")


@dataclass
class Frame:
    """Maps data coordinates into a plotting rectangle."""

    x_lo: float
    x_hi: float
    y_lo: float
    y_hi: float
    width: int = 640
    height: int = 480
    margin: int = 50

    def px(self, x):
        span = (self.x_hi - self.x_lo) or 1.0
        return self.margin + (np.asarray(x, dtype=float) - self.x_lo) / span * (self.width - 2 * self.margin)

    def py(self, y):
        span = (self.y_hi - self.y_lo) or 1.0
        return self.height - self.margin - (np.asarray(y, dtype=float) - self.y_lo) / span * (self.height - 2 * self.margin)


def _padded(lo: float, hi: float, frac: float = 0.05) -> tuple[float, float]:
    if not np.isfinite(lo) or not np.isfinite(hi):
        return 0.0, 1.0
    pad = (hi - lo) * frac or 0.5
    return lo - pad, hi + pad


def _document(frame: Frame, body: list[str], title: str, x_label: str, y_label: str) -> str:
    f = frame
    left, right = f.margin, f.width - f.margin
    top, bottom = f.margin, f.height - f.margin
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{f.width}" height="{f.height}" '
        f'viewBox="0 0 {f.width} {f.height}">',
        f'<rect x="0" y="0" width="{f.width}" height="{f.height}" fill="white"/>',
        *body,
        f'<rect x="{left}" y="{top}" width="{right - left}" height="{bottom - top}" fill="none" stroke="black"/>',
        f'<text x="{f.width / 2:.1f}" y="{top - 18}" text-anchor="middle" font-size="15">{escape(title)}</text>',
        f'<text x="{f.width / 2:.1f}" y="{f.height - 10}" text-anchor="middle" font-size="12">{escape(x_label)}</text>',
        f'<text x="14" y="{f.height / 2:.1f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {f.height / 2:.1f})">{escape(y_label)}</text>',
    ]
    for v in np.linspace(f.x_lo, f.x_hi, 5):
        parts.append(f'<text x="{float(f.px(v)):.1f}" y="{bottom + 16}" text-anchor="middle" font-size="10">{v:.3g}</text>')
    for v in np.linspace(f.y_lo, f.y_hi, 5):
        parts.append(f'<text x="{left - 6}" y="{float(f.py(v)) + 3:.1f}" text-anchor="end" font-size="10">{v:.3g}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def line_chart(x, series: dict[str, np.ndarray], title: str = "", x_label: str = "", y_label: str = "") -> str:
    """One polyline per named series over a shared x axis; non-finite values break the line."""
    x = np.asarray(x, dtype=float)
    ys = {k: np.asarray(v, dtype=float) for k, v in series.items()}
    finite = np.concatenate([v[np.isfinite(v)] for v in ys.values()] or [np.zeros(1)])
    if finite.size == 0:
        finite = np.zeros(1)
    frame = Frame(*_padded(float(x.min()), float(x.max()), 0.0), *_padded(float(finite.min()), float(finite.max())))
    body = []
    for i, (name, y) in enumerate(ys.items()):
        color = PALETTE[i % len(PALETTE)]
        segment: list[str] = []
        runs = []
        for xi, yi in zip(x, y):
            if np.isfinite(yi):
                segment.append(f"{float(frame.px(xi)):.2f},{float(frame.py(yi)):.2f}")
            elif segment:
                runs.append(segment)
                segment = []
        if segment:
            runs.append(segment)
        for run in runs:
            body.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                        f'data-series="{escape(name)}" points="{" ".join(run)}"/>')
        ly = frame.margin + 14 + 16 * i
        lx = frame.width - frame.margin - 150
        body.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 20}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        body.append(f'<text x="{lx + 26}" y="{ly}" font-size="11">{escape(name)}</text>')
    return _document(frame, body, title, x_label, y_label)


def scatter_regions(points: dict[str, tuple[np.ndarray, np.ndarray]], grid_x: np.ndarray, grid_y: np.ndarray,
                    grid_labels: np.ndarray, title: str = "") -> str:
    """Scatter of labelled point groups over a label raster.

    ``points`` maps a group name to ``(xy, labels)``; ``grid_labels[i, j]`` is
    the predicted class at ``(grid_x[j], grid_y[i])``. Every point becomes one
    ``<circle>`` tagged with its group.
    """
    allxy = np.concatenate([xy for xy, _ in points.values()])
    frame = Frame(*_padded(min(allxy[:, 0].min(), grid_x.min()), max(allxy[:, 0].max(), grid_x.max()), 0.0),
                  *_padded(min(allxy[:, 1].min(), grid_y.min()), max(allxy[:, 1].max(), grid_y.max()), 0.0))
    body = []
    dx = abs(float(frame.px(grid_x[1]) - frame.px(grid_x[0]))) if len(grid_x) > 1 else 1.0
    dy = abs(float(frame.py(grid_y[1]) - frame.py(grid_y[0]))) if len(grid_y) > 1 else 1.0
    for i, gy in enumerate(grid_y):
        for j, gx in enumerate(grid_x):
            fill = REGION_FILL[int(grid_labels[i, j]) % len(REGION_FILL)]
            body.append(f'<rect x="{float(frame.px(gx)) - dx / 2:.2f}" y="{float(frame.py(gy)) - dy / 2:.2f}" '
                        f'width="{dx:.2f}" height="{dy:.2f}" fill="{fill}" stroke="none"/>')
    markers = {0: "none", 1: "black"}
    for g, (name, (xy, labels)) in enumerate(points.items()):
        stroke = markers.get(g, "gray")
        for (x, y), lab in zip(xy, labels):
            color = PALETTE[int(lab) % len(PALETTE)]
            body.append(f'<circle class="{escape(name)}" cx="{float(frame.px(x)):.2f}" cy="{float(frame.py(y)):.2f}" '
                        f'r="2.2" fill="{color}" stroke="{stroke}" stroke-width="0.4"/>')
    return _document(frame, body, title, "x0", "x1")

"""Tiny SVG chart writer: axes, step histograms, polylines, legend.

Charts are built through xml.etree so the output is always well-formed XML.
Only the handful of shapes the report needs are supported.
"""

from __future__ import annotations

import xml.etree.ElementTree as ET
from dataclasses import dataclass, field

import numpy as np

PALETTE = ("#1f6feb", "#d29922", "#3fb950", "#f85149", "#8957e5", "#6e7781")

MARGIN_LEFT = 64
MARGIN_RIGHT = 20
MARGIN_TOP = 34
MARGIN_BOTTOM = 46


@dataclass
class _Series:
    kind: str  # "steps" | "line"
    xs: np.ndarray
    ys: np.ndarray
    label: str
    color: str


@dataclass
class SvgFigure:
    width: int = 640
    height: int = 400
    title: str = ""
    x_label: str = ""
    y_label: str = ""
    series: list[_Series] = field(default_factory=list)

    def _color(self) -> str:
        return PALETTE[len(self.series) % len(PALETTE)]

    def add_step_histogram(self, edges, heights, label: str) -> None:
        """Histogram drawn as a staircase over its bin edges."""
        edges = np.asarray(edges, dtype=np.float64)
        heights = np.asarray(heights, dtype=np.float64)
        if edges.size != heights.size + 1:
            raise ValueError("need one more edge than heights")
        xs = np.repeat(edges, 2)[1:-1]
        ys = np.repeat(heights, 2)
        self.series.append(_Series("steps", xs, ys, label, self._color()))

    def add_polyline(self, xs, ys, label: str) -> None:
        xs = np.asarray(xs, dtype=np.float64)
        ys = np.asarray(ys, dtype=np.float64)
        if xs.shape != ys.shape:
            raise ValueError("x and y must have the same length")
        self.series.append(_Series("line", xs, ys, label, self._color()))

    def _limits(self) -> tuple[float, float, float, float]:
        xs = np.concatenate([s.xs for s in self.series])
        ys = np.concatenate([s.ys for s in self.series])
        x_lo, x_hi = float(xs.min()), float(xs.max())
        y_lo, y_hi = min(0.0, float(ys.min())), float(ys.max())
        if x_hi == x_lo:
            x_hi = x_lo + 1.0
        if y_hi == y_lo:
            y_hi = y_lo + 1.0
        return x_lo, x_hi, y_lo, y_hi + 0.05 * (y_hi - y_lo)

    def render(self) -> str:
        if not self.series:
            raise ValueError("figure has no series")
        x_lo, x_hi, y_lo, y_hi = self._limits()
        plot_w = self.width - MARGIN_LEFT - MARGIN_RIGHT
        plot_h = self.height - MARGIN_TOP - MARGIN_BOTTOM

        def px(x: float) -> float:
            return MARGIN_LEFT + (x - x_lo) / (x_hi - x_lo) * plot_w

        def py(y: float) -> float:
            return MARGIN_TOP + plot_h - (y - y_lo) / (y_hi - y_lo) * plot_h

        svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg",
                         width=str(self.width), height=str(self.height),
                         viewBox=f"0 0 {self.width} {self.height}")
        ET.SubElement(svg, "rect", x="0", y="0", width=str(self.width),
                      height=str(self.height), fill="white")
        if self.title:
            t = ET.SubElement(svg, "text", x=str(self.width / 2), y="20",
                              fill="#24292f")
            t.set("text-anchor", "middle")
            t.set("font-size", "14")
            t.text = self.title

        axis_style = {"stroke": "#57606a", "stroke-width": "1"}
        ET.SubElement(svg, "line", x1=str(MARGIN_LEFT), y1=str(py(y_lo)),
                      x2=str(MARGIN_LEFT + plot_w), y2=str(py(y_lo)), **axis_style)
        ET.SubElement(svg, "line", x1=str(MARGIN_LEFT), y1=str(MARGIN_TOP),
                      x2=str(MARGIN_LEFT), y2=str(py(y_lo)), **axis_style)

        for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
            xv = x_lo + frac * (x_hi - x_lo)
            yv = y_lo + frac * (y_hi - y_lo)
            xt = ET.SubElement(svg, "text", x=str(px(xv)),
                               y=str(py(y_lo) + 16), fill="#57606a")
            xt.set("text-anchor", "middle")
            xt.set("font-size", "10")
            xt.text = f"{xv:g}"
            yt = ET.SubElement(svg, "text", x=str(MARGIN_LEFT - 6),
                               y=str(py(yv) + 3), fill="#57606a")
            yt.set("text-anchor", "end")
            yt.set("font-size", "10")
            yt.text = f"{yv:.3g}"

        if self.x_label:
            xl = ET.SubElement(svg, "text", x=str(MARGIN_LEFT + plot_w / 2),
                               y=str(self.height - 8), fill="#24292f")
            xl.set("text-anchor", "middle")
            xl.set("font-size", "12")
            xl.text = self.x_label
        if self.y_label:
            yl = ET.SubElement(svg, "text", x="14",
                               y=str(MARGIN_TOP + plot_h / 2), fill="#24292f")
            yl.set("text-anchor", "middle")
            yl.set("font-size", "12")
            yl.set("transform",
                   f"rotate(-90 14 {MARGIN_TOP + plot_h / 2})")
            yl.text = self.y_label

        for s in self.series:
            points = " ".join(f"{px(x):.2f},{py(y):.2f}"
                              for x, y in zip(s.xs, s.ys))
            ET.SubElement(svg, "polyline", points=points, fill="none",
                          stroke=s.color, **{"stroke-width": "1.5"})

        for i, s in enumerate(self.series):
            ly = MARGIN_TOP + 10 + 16 * i
            lx = MARGIN_LEFT + plot_w - 130
            ET.SubElement(svg, "line", x1=str(lx), y1=str(ly), x2=str(lx + 22),
                          y2=str(ly), stroke=s.color, **{"stroke-width": "2"})
            lt = ET.SubElement(svg, "text", x=str(lx + 28), y=str(ly + 4),
                               fill="#24292f")
            lt.set("font-size", "11")
            lt.text = s.label

        return ET.tostring(svg, encoding="unicode")

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write('<?xml version="1.0" encoding="UTF-8"?>\n')
            fh.write(self.render())
            fh.write("\n")

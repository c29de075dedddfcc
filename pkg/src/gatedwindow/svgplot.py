"""Small deterministic SVG chart emitter (lines, markers, step curves, histograms).

Coordinates are written with fixed precision so identical inputs give
identical bytes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


def _c(v: float) -> str:
    return f"{v:.9f}".rstrip("0").rstrip(".") if v != 0 else "0"


def _nice_step(span: float, target: int = 5) -> float:
    raw = span / max(target, 1)
    mag = 10.0 ** math.floor(math.log10(raw))
    for m in (1, 2, 2.5, 5, 10):
        if m * mag >= raw:
            return m * mag
    return 10 * mag


def _label(v: float) -> str:
    if v == 0:
        return "0"
    a = abs(v)
    if a >= 1e4 or a < 1e-3:
        return f"{v:.0e}".replace("e+0", "e").replace("e-0", "e-")
    return f"{v:.6g}"


@dataclass
class Series:
    x: np.ndarray
    y: np.ndarray
    label: str
    style: str = "line"   # line | points | steps


@dataclass
class Figure:
    title: str
    xlabel: str
    ylabel: str
    xscale: str = "linear"
    yscale: str = "linear"
    width: int = 640
    height: int = 420
    series: list[Series] = field(default_factory=list)
    bars: list[tuple[np.ndarray, np.ndarray, str]] = field(default_factory=list)

    margin = (70, 20, 40, 55)  # left, right, top, bottom

    def add(self, x, y, label: str, style: str = "line") -> "Figure":
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        ok = np.isfinite(x) & np.isfinite(y)
        if self.xscale == "log":
            ok &= x > 0
        if self.yscale == "log":
            ok &= y > 0
        self.series.append(Series(x[ok], y[ok], label, style))
        return self

    def add_histogram(self, edges, counts, label: str) -> "Figure":
        self.bars.append((np.asarray(edges, dtype=float), np.asarray(counts, dtype=float), label))
        return self

    # -- geometry -------------------------------------------------------------

    def _t(self, v, scale):
        v = np.asarray(v, dtype=float)
        return np.log10(v) if scale == "log" else v

    def _limits(self):
        xs, ys = [], []
        for s in self.series:
            xs.append(self._t(s.x, self.xscale))
            ys.append(self._t(s.y, self.yscale))
        for edges, counts, _ in self.bars:
            xs.append(self._t(edges, self.xscale))
            ys.append(np.concatenate([[0.0], counts]))
        xs = np.concatenate(xs) if xs else np.array([0.0, 1.0])
        ys = np.concatenate(ys) if ys else np.array([0.0, 1.0])
        if xs.size == 0:
            xs = np.array([0.0, 1.0])
        if ys.size == 0:
            ys = np.array([0.0, 1.0])
        lims = []
        for a in (xs, ys):
            lo, hi = float(a.min()), float(a.max())
            if hi - lo < 1e-12:
                lo, hi = lo - 0.5, hi + 0.5
            lims.append((lo, hi))
        return lims

    def project(self, x, y):
        """Map data coordinates to SVG pixel coordinates."""
        (x0, x1), (y0, y1) = self._limits()
        L, R, T, B = self.margin
        pw, ph = self.width - L - R, self.height - T - B
        px = L + (self._t(x, self.xscale) - x0) / (x1 - x0) * pw
        py = T + ph - (self._t(y, self.yscale) - y0) / (y1 - y0) * ph
        return px, py

    def _ticks(self, lo, hi, scale):
        if scale == "log":
            start, stop = math.ceil(lo - 1e-9), math.floor(hi + 1e-9)
            if stop - start > 8:
                step = math.ceil((stop - start) / 8)
                return [(float(e), _label(10.0 ** e)) for e in range(start, stop + 1, step)]
            return [(float(e), _label(10.0 ** e)) for e in range(start, stop + 1)]
        step = _nice_step(hi - lo)
        first = math.ceil(lo / step - 1e-9) * step
        out = []
        v = first
        while v <= hi + 1e-9 * step:
            out.append((v, _label(round(v, 12))))
            v += step
        return out

    def to_svg(self) -> str:
        (x0, x1), (y0, y1) = self._limits()
        L, R, T, B = self.margin
        W, Hh = self.width, self.height
        pw, ph = W - L - R, Hh - T - B
        sx = lambda v: L + (v - x0) / (x1 - x0) * pw
        sy = lambda v: T + ph - (v - y0) / (y1 - y0) * ph
        out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{Hh}" '
               f'viewBox="0 0 {W} {Hh}" font-family="sans-serif" font-size="11">',
               f'<rect x="0" y="0" width="{W}" height="{Hh}" fill="white"/>',
               f'<text x="{W / 2}" y="{T - 14}" text-anchor="middle" font-size="13">{escape(self.title)}</text>',
               f'<rect x="{L}" y="{T}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>']
        for v, lab in self._ticks(x0, x1, self.xscale):
            p = _c(sx(v))
            out.append(f'<line x1="{p}" y1="{T + ph}" x2="{p}" y2="{T + ph + 4}" stroke="#333"/>')
            out.append(f'<text x="{p}" y="{T + ph + 16}" text-anchor="middle">{escape(lab)}</text>')
        for v, lab in self._ticks(y0, y1, self.yscale):
            p = _c(sy(v))
            out.append(f'<line x1="{L - 4}" y1="{p}" x2="{L}" y2="{p}" stroke="#333"/>')
            out.append(f'<text x="{L - 6}" y="{p}" text-anchor="end" dominant-baseline="middle">{escape(lab)}</text>')
        out.append(f'<text x="{L + pw / 2}" y="{Hh - 12}" text-anchor="middle">{escape(self.xlabel)}</text>')
        out.append(f'<text x="14" y="{T + ph / 2}" text-anchor="middle" '
                   f'transform="rotate(-90 14 {T + ph / 2})">{escape(self.ylabel)}</text>')
        k = 0
        for edges, counts, label in self.bars:
            color = PALETTE[k % len(PALETTE)]
            k += 1
            ex = self._t(edges, self.xscale)
            for a, b, c in zip(ex[:-1], ex[1:], counts):
                top, base = sy(c), sy(0.0)
                out.append(f'<rect class="bar" data-label="{escape(label)}" x="{_c(sx(a))}" y="{_c(top)}" '
                           f'width="{_c(sx(b) - sx(a))}" height="{_c(base - top)}" '
                           f'fill="{color}" fill-opacity="0.5" stroke="{color}"/>')
        for s in self.series:
            color = PALETTE[k % len(PALETTE)]
            k += 1
            px = sx(self._t(s.x, self.xscale))
            py = sy(self._t(s.y, self.yscale))
            if s.style == "steps" and px.size:
                sxs, sys_ = [px[0]], [py[0]]
                for i in range(1, px.size):
                    sxs += [px[i], px[i]]
                    sys_ += [py[i - 1], py[i]]
                px, py = np.array(sxs), np.array(sys_)
            pts = " ".join(f"{_c(a)},{_c(b)}" for a, b in zip(px, py))
            if s.style == "points":
                out.append(f'<g class="series" data-label="{escape(s.label)}" fill="{color}">')
                out += [f'<circle cx="{_c(a)}" cy="{_c(b)}" r="2.5"/>' for a, b in zip(px, py)]
                out.append("</g>")
            else:
                out.append(f'<polyline class="series" data-label="{escape(s.label)}" points="{pts}" '
                           f'fill="none" stroke="{color}" stroke-width="1.5"/>')
        # legend
        items = [b[2] for b in self.bars] + [s.label for s in self.series]
        for i, lab in enumerate(items):
            y = T + 14 + 14 * i
            out.append(f'<rect x="{L + pw - 150}" y="{y - 8}" width="10" height="10" '
                       f'fill="{PALETTE[i % len(PALETTE)]}"/>')
            out.append(f'<text x="{L + pw - 135}" y="{y + 1}">{escape(lab)}</text>')
        out.append("</svg>")
        return "\n".join(out) + "\n"

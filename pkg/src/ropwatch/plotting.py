"""Plot-ready series derived from a trace, with CSV and a bare SVG renderer.

CSV is the canonical artifact. The SVG output is deliberately minimal: axes,
one polyline or point cloud per column, and a legend.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

from .indicators import GapAnalyzer, ip_features
from .isa import OpcodeClass, TraceEvent

KINDS = ("retcall", "gap", "ip", "ipfeat")
_STYLE = {"retcall": "line", "gap": "step", "ip": "scatter", "ipfeat": "line"}
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")


@dataclass(frozen=True)
class PlotSeries:
    kind: str
    columns: tuple[str, ...]
    points: tuple[tuple, ...]
    label: str = ""

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown plot kind {self.kind!r}")
        prev = None
        for p in self.points:
            if len(p) != len(self.columns) + 1:
                raise ValueError("each point needs x plus one value per column")
            if prev is not None and p[0] <= prev:
                raise ValueError("x must be strictly increasing")
            if not all(math.isfinite(v) for v in p[1:]):
                raise ValueError("y values must be finite")
            prev = p[0]

    @property
    def xs(self) -> list:
        return [p[0] for p in self.points]

    def column(self, name: str) -> list:
        i = self.columns.index(name) + 1
        return [p[i] for p in self.points]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("x",) + self.columns)
        for p in self.points:
            w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in p])
        return buf.getvalue()


def _thread(events: Iterable[TraceEvent], tid: int | None) -> list[TraceEvent]:
    events = list(events)
    if tid is None:
        tid = events[0].tid if events else 0
    return [ev for ev in events if ev.tid == tid]


def retcall_series(events: Iterable[TraceEvent], tid: int | None = None, label: str = "") -> PlotSeries:
    """Running call and return counts after every event of one thread."""
    calls = rets = 0
    points = []
    for i, ev in enumerate(_thread(events, tid)):
        calls += ev.cls is OpcodeClass.CALL
        rets += ev.cls is OpcodeClass.RET
        points.append((i, calls, rets))
    return PlotSeries("retcall", ("calls", "rets"), tuple(points), label)


def gap_series(events: Iterable[TraceEvent], tid: int | None = None, label: str = "") -> PlotSeries:
    """Recorded inter-return gap at each RET (x is the event index)."""
    an = GapAnalyzer()
    points = []
    for i, ev in enumerate(_thread(events, tid)):
        an.feed(ev)
        if ev.cls is OpcodeClass.RET:
            points.append((i, an.state[ev.tid].gap_history[-1]))
    return PlotSeries("gap", ("gap",), tuple(points), label)


def ip_series(events: Iterable[TraceEvent], tid: int | None = None, label: str = "") -> PlotSeries:
    return PlotSeries("ip", ("addr",),
                      tuple((i, ev.addr) for i, ev in enumerate(_thread(events, tid))), label)


def ipfeat_series(events: Iterable[TraceEvent], tid: int | None = None, label: str = "",
                  **params) -> PlotSeries:
    evs = _thread(events, tid)
    series = ip_features(evs, **params)
    recs = series[evs[0].tid].records if evs else []
    return PlotSeries("ipfeat", ("revisit_score", "scatter_score"),
                      tuple((r.window_start_seq, r.revisit_score, r.scatter_score) for r in recs), label)


def make_series(kind: str, events: Iterable[TraceEvent], tid: int | None = None,
                label: str = "", **params) -> PlotSeries:
    if kind == "retcall":
        return retcall_series(events, tid, label)
    if kind == "gap":
        return gap_series(events, tid, label)
    if kind == "ip":
        return ip_series(events, tid, label)
    if kind == "ipfeat":
        return ipfeat_series(events, tid, label, **params)
    raise ValueError(f"unknown plot kind {kind!r}")


# -------------------------------------------------------------------- svg

def _scale(lo: float, hi: float, a: float, b: float):
    span = (hi - lo) or 1.0
    return lambda v: a + (v - lo) * (b - a) / span


def _path(pts: Sequence[tuple[float, float]], step: bool) -> str:
    out = []
    for j, (x, y) in enumerate(pts):
        if step and j:
            out.append(f"{x:.1f},{pts[j - 1][1]:.1f}")
        out.append(f"{x:.1f},{y:.1f}")
    return " ".join(out)


def to_svg(series: PlotSeries, width: int = 640, height: int = 360) -> str:
    left, right, top, bottom = 60, width - 20, 30, height - 40
    xs = series.xs or [0]
    ys = [v for p in series.points for v in p[1:]] or [0]
    sx = _scale(min(xs), max(xs), left, right)
    sy = _scale(min(ys), max(ys), bottom, top)
    style = _STYLE[series.kind]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>',
        f'<text x="{left}" y="{bottom + 15}">{min(xs)}</text>',
        f'<text x="{right}" y="{bottom + 15}" text-anchor="end">{max(xs)}</text>',
        f'<text x="{left - 5}" y="{bottom}" text-anchor="end">{_fmt(min(ys))}</text>',
        f'<text x="{left - 5}" y="{top + 4}" text-anchor="end">{_fmt(max(ys))}</text>',
        f'<text x="{(left + right) // 2}" y="{height - 8}" text-anchor="middle">event index</text>',
    ]
    if series.label:
        parts.append(f'<text x="{left}" y="18">{_escape(series.label)}</text>')
    for c, name in enumerate(series.columns):
        color = _COLORS[c % len(_COLORS)]
        pts = [(sx(p[0]), sy(p[c + 1])) for p in series.points]
        if style == "scatter":
            parts.extend(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="1.5" fill="{color}"/>' for x, y in pts)
        elif pts:
            parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                         f'points="{_path(pts, style == "step")}"/>')
        ly = top + 14 * c
        parts.append(f'<rect x="{right - 90}" y="{ly - 8}" width="10" height="10" fill="{color}"/>')
        parts.append(f'<text x="{right - 75}" y="{ly + 1}">{_escape(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _fmt(v: float) -> str:
    return f"{v:#x}" if isinstance(v, int) and v >= 0x1000 else (f"{v:.3g}" if isinstance(v, float) else str(v))


def _escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")

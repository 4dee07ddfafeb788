"""Minimal hand-rolled SVG charts: enough to eyeball an energy trace or a
rank-probe score cloud without pulling in a plotting stack."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

__all__ = ["line_chart", "scatter_chart"]

_COLORS = ("#1f6fb2", "#d1495b", "#3a7d44", "#8e5ba6", "#c98b1e", "#4a4a4a")
_WIDTH, _HEIGHT = 720, 440
_MARGIN_L, _MARGIN_R, _MARGIN_T, _MARGIN_B = 64, 160, 48, 56


def _nice_step(span: float) -> float:
    raw = span / 5.0
    mag = 10.0 ** math.floor(math.log10(raw))
    for mult in (1.0, 2.0, 5.0):
        if raw <= mult * mag:
            return mult * mag
    return 10.0 * mag


def _ticks(lo: float, hi: float) -> list[float]:
    step = _nice_step(hi - lo)
    first = math.ceil(lo / step) * step
    out = []
    v = first
    while v <= hi + 1e-12 * max(1.0, abs(hi)):
        out.append(0.0 if abs(v) < step * 1e-9 else v)
        v += step
    return out


def _fmt(v: float) -> str:
    if v == int(v) and abs(v) < 1e6:
        return str(int(v))
    return f"{v:.4g}"


class _Frame:
    """Data-to-pixel mapping over the plot rectangle, with padded bounds."""

    def __init__(self, points: list[tuple[float, float]]):
        xs = [p[0] for p in points]
        ys = [p[1] for p in points]
        self.x0, self.x1 = self._pad(min(xs), max(xs))
        self.y0, self.y1 = self._pad(min(ys), max(ys))
        self.px0, self.px1 = _MARGIN_L, _WIDTH - _MARGIN_R
        self.py0, self.py1 = _HEIGHT - _MARGIN_B, _MARGIN_T

    @staticmethod
    def _pad(lo: float, hi: float) -> tuple[float, float]:
        if not (math.isfinite(lo) and math.isfinite(hi)):
            raise ValueError("chart data must be finite")
        if hi == lo:
            pad = max(abs(lo), 1.0) * 0.5
        else:
            pad = (hi - lo) * 0.06
        return lo - pad, hi + pad

    def x(self, v: float) -> float:
        t = (v - self.x0) / (self.x1 - self.x0)
        return self.px0 + t * (self.px1 - self.px0)

    def y(self, v: float) -> float:
        t = (v - self.y0) / (self.y1 - self.y0)
        return self.py0 + t * (self.py1 - self.py0)


def _chrome(frame: _Frame, title: str, x_label: str, y_label: str) -> list[str]:
    parts = [
        f'<rect x="{frame.px0}" y="{frame.py1}" '
        f'width="{frame.px1 - frame.px0}" height="{frame.py0 - frame.py1}" '
        'fill="none" stroke="#888" stroke-width="1"/>',
        f'<text x="{_WIDTH / 2}" y="24" text-anchor="middle" '
        f'font-size="16" font-family="sans-serif">{escape(title)}</text>',
        f'<text x="{(frame.px0 + frame.px1) / 2}" y="{_HEIGHT - 12}" '
        f'text-anchor="middle" font-size="12" font-family="sans-serif">'
        f'{escape(x_label)}</text>',
        f'<text x="16" y="{(frame.py0 + frame.py1) / 2}" text-anchor="middle" '
        f'font-size="12" font-family="sans-serif" '
        f'transform="rotate(-90 16 {(frame.py0 + frame.py1) / 2})">'
        f'{escape(y_label)}</text>',
    ]
    for v in _ticks(frame.x0, frame.x1):
        px = frame.x(v)
        parts.append(f'<line x1="{px:.2f}" y1="{frame.py0}" x2="{px:.2f}" '
                     f'y2="{frame.py1}" stroke="#ddd" stroke-width="1"/>')
        parts.append(f'<text x="{px:.2f}" y="{frame.py0 + 18}" '
                     f'text-anchor="middle" font-size="11" '
                     f'font-family="sans-serif">{_fmt(v)}</text>')
    for v in _ticks(frame.y0, frame.y1):
        py = frame.y(v)
        parts.append(f'<line x1="{frame.px0}" y1="{py:.2f}" x2="{frame.px1}" '
                     f'y2="{py:.2f}" stroke="#ddd" stroke-width="1"/>')
        parts.append(f'<text x="{frame.px0 - 6}" y="{py + 4:.2f}" '
                     f'text-anchor="end" font-size="11" '
                     f'font-family="sans-serif">{_fmt(v)}</text>')
    return parts


def _legend(names: list[str]) -> list[str]:
    parts = []
    for i, name in enumerate(names):
        color = _COLORS[i % len(_COLORS)]
        y = _MARGIN_T + 10 + i * 20
        x = _WIDTH - _MARGIN_R + 16
        parts.append(f'<rect x="{x}" y="{y - 9}" width="12" height="12" '
                     f'fill="{color}"/>')
        parts.append(f'<text x="{x + 18}" y="{y + 2}" font-size="12" '
                     f'font-family="sans-serif">{escape(name)}</text>')
    return parts


def _document(body: list[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{_WIDTH}" '
            f'height="{_HEIGHT}" viewBox="0 0 {_WIDTH} {_HEIGHT}">'
            f'<rect width="{_WIDTH}" height="{_HEIGHT}" fill="white"/>')
    return head + "".join(body) + "</svg>\n"


def _gather(series: dict[str, list[tuple[float, float]]],
            min_points: int) -> list[tuple[float, float]]:
    if not series:
        raise ValueError("chart needs at least one series")
    every = []
    for name, points in series.items():
        if len(points) < min_points:
            raise ValueError(f"series {name!r} needs >= {min_points} points")
        every.extend((float(x), float(y)) for x, y in points)
    return every


def line_chart(series: dict[str, list[tuple[float, float]]],
               title: str = "", x_label: str = "", y_label: str = "") -> str:
    """One polyline per named series, shared axes, legend at the right."""
    frame = _Frame(_gather(series, min_points=2))
    body = _chrome(frame, title, x_label, y_label)
    for i, (name, points) in enumerate(series.items()):
        color = _COLORS[i % len(_COLORS)]
        coords = " ".join(f"{frame.x(x):.2f},{frame.y(y):.2f}"
                          for x, y in points)
        body.append(f'<polyline points="{coords}" fill="none" '
                    f'stroke="{color}" stroke-width="1.8"/>')
    body.extend(_legend(list(series)))
    return _document(body)


def scatter_chart(groups: dict[str, list[tuple[float, float]]],
                  title: str = "", x_label: str = "", y_label: str = "") -> str:
    """One dot cloud per named group, shared axes, legend at the right."""
    frame = _Frame(_gather(groups, min_points=1))
    body = _chrome(frame, title, x_label, y_label)
    for i, (name, points) in enumerate(groups.items()):
        color = _COLORS[i % len(_COLORS)]
        for x, y in points:
            body.append(f'<circle cx="{frame.x(float(x)):.2f}" '
                        f'cy="{frame.y(float(y)):.2f}" r="3" '
                        f'fill="{color}" fill-opacity="0.75"/>')
    body.extend(_legend(list(groups)))
    return _document(body)

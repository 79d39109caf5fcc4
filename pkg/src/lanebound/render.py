"""Deterministic SVG rendering of tracks, trajectories, and archived pairs.

The output is a pure function of its inputs: coordinates are rounded to two
decimals, colors come from fixed palettes, and nothing time- or
environment-dependent is embedded, so repeated renders are byte-identical.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .geometry import Track, heading_vector
from .search import ArchiveEntry

_TRAJECTORY_COLORS = ("#1f77b4", "#ff7f0e", "#2ca02c", "#9467bd", "#8c564b")
_ARROW_SCALE_M = 4.0  # arrow length at the speed limit


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _polyline(points: np.ndarray, close: bool) -> str:
    parts = [f"{'M' if i == 0 else 'L'} {_fmt(p[0])} {_fmt(p[1])}" for i, p in enumerate(points)]
    if close:
        parts.append("Z")
    return " ".join(parts)


def _lane_edge(track: Track, side: float) -> np.ndarray:
    pts = np.asarray(track.waypoints, dtype=float)
    out = np.empty_like(pts)
    for i in range(len(pts)):
        psi = math.radians(track.seg_heading[i])
        # unit normal on the positive side of the travel direction
        n = (-math.cos(psi), math.sin(psi))
        out[i, 0] = pts[i, 0] + side * track.half_width * n[0]
        out[i, 1] = pts[i, 1] + side * track.half_width * n[1]
    return out


def _state_marker(state, shape: str, color: str, v_max: float) -> list[str]:
    x, y, r = state.x, state.y, 0.9
    lines = []
    if shape == "plus":
        lines.append((x - r, y, x + r, y))
        lines.append((x, y - r, x, y + r))
    else:  # cross
        d = r / math.sqrt(2.0)
        lines.append((x - d, y - d, x + d, y + d))
        lines.append((x - d, y + d, x + d, y - d))
    svg = [
        f'<line x1="{_fmt(a)}" y1="{_fmt(b)}" x2="{_fmt(c)}" y2="{_fmt(d)}" '
        f'stroke="{color}" stroke-width="0.35"/>'
        for a, b, c, d in lines
    ]
    hx, hy = heading_vector(state.psi_deg)
    length = _ARROW_SCALE_M * state.v_kmh / v_max
    svg.append(
        f'<line x1="{_fmt(x)}" y1="{_fmt(y)}" '
        f'x2="{_fmt(x + length * hx)}" y2="{_fmt(y + length * hy)}" '
        f'stroke="{color}" stroke-width="0.25" marker-end="url(#ah)"/>'
    )
    return svg


def render_track_svg(
    track: Track,
    trajectories: Sequence[tuple[str, np.ndarray]] = (),
    entries: Sequence[ArchiveEntry] = (),
    v_max_kmh: float = 30.0,
    pixels_per_meter: float = 4.0,
) -> str:
    """Render the track (center line, lane edges, origin), optional labeled
    trajectories, and optional archived pairs. In each pair s1 is drawn as a
    plus and s2 as a cross, green when that state is the recoverable one;
    the attached arrow points along the heading with length proportional to
    speed."""
    pts = np.asarray(track.waypoints, dtype=float)
    margin = track.lane_width + 6.0
    x0, y0 = pts.min(axis=0) - margin
    x1, y1 = pts.max(axis=0) + margin
    w, h = x1 - x0, y1 - y0

    body: list[str] = []
    for side in (-1.0, 1.0):
        body.append(
            f'<path d="{_polyline(_lane_edge(track, side), close=True)}" '
            'fill="none" stroke="#555555" stroke-width="0.3"/>'
        )
    body.append(
        f'<path d="{_polyline(pts, close=True)}" fill="none" '
        'stroke="#bbbbbb" stroke-width="0.15" stroke-dasharray="1.2 1.2"/>'
    )
    for p in pts:
        body.append(
            f'<circle cx="{_fmt(p[0])}" cy="{_fmt(p[1])}" r="0.22" fill="#888888"/>'
        )
    origin = pts[track.origin_index]
    body.append(
        f'<circle cx="{_fmt(origin[0])}" cy="{_fmt(origin[1])}" r="0.8" '
        'fill="none" stroke="#000000" stroke-width="0.3"/>'
    )

    for k, (label, xy) in enumerate(trajectories):
        color = _TRAJECTORY_COLORS[k % len(_TRAJECTORY_COLORS)]
        xy = np.asarray(xy, dtype=float)
        body.append(
            f'<path d="{_polyline(xy, close=False)}" fill="none" '
            f'stroke="{color}" stroke-width="0.35" data-label="{label}"/>'
        )

    for e in entries:
        for state, shape in ((e.pair.s1, "plus"), (e.pair.s2, "cross")):
            is_rec = (e.recoverable == "s1") == (shape == "plus")
            color = "#2ca02c" if is_rec else "#d62728"
            body.extend(_state_marker(state, shape, color, v_max_kmh))

    width_px = max(1, round(w * pixels_per_meter))
    height_px = max(1, round(h * pixels_per_meter))
    # the world y axis points up; flip it into SVG screen coordinates
    head = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width_px}" '
        f'height="{height_px}" viewBox="{_fmt(x0)} {_fmt(-y1)} {_fmt(w)} {_fmt(h)}">'
        '<defs><marker id="ah" viewBox="0 0 4 4" refX="3" refY="2" '
        'markerWidth="4" markerHeight="4" orient="auto">'
        '<path d="M 0 0 L 4 2 L 0 4 Z" fill="context-stroke"/></marker></defs>'
        f'<rect x="{_fmt(x0)}" y="{_fmt(-y1)}" width="{_fmt(w)}" height="{_fmt(h)}" '
        'fill="#ffffff"/>'
        '<g transform="scale(1,-1)">'
    )
    return head + "".join(body) + "</g></svg>"


def save_svg(path, svg: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(svg)

"""Track geometry: closed waypoint loops, cross-track distance, curvature.

Conventions used across the package:

* Positions are absolute 2D coordinates in meters.
* Headings are degrees in [0, 360), measured from the absolute y-axis and
  increasing toward the positive x-axis (a road running along +x has
  heading 90).
* The signed side of the centerline is positive on the side the heading
  rotates into as it increases; lateral offsets and curvatures share that
  sign so a controller can combine them without extra bookkeeping.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class DegenerateTriple(ValueError):
    """Raised when consecutive waypoints coincide and curvature is undefined."""


class MismatchedLength(ValueError):
    """Raised when two tracks cannot be aligned waypoint by waypoint."""


class BudgetExhausted(RuntimeError):
    """Raised when an accept/reject loop runs out of attempts."""


# ---------------------------------------------------------------------------
# angle helpers


def wrap360(angle_deg: float) -> float:
    """Normalize an angle to [0, 360)."""
    return float(angle_deg) % 360.0


def wrap180(angle_deg: float) -> float:
    """Normalize an angle to (-180, 180]."""
    a = float(angle_deg) % 360.0
    if a > 180.0:
        a -= 360.0
    return a


def circular_delta(a_deg: float, b_deg: float) -> float:
    """Signed minimal rotation from b to a, in (-180, 180]."""
    return wrap180(a_deg - b_deg)


def circular_distance(a_deg: float, b_deg: float) -> float:
    """Unsigned minimal arc between two headings, in [0, 180]."""
    return abs(wrap180(a_deg - b_deg))


def heading_of(dx: float, dy: float) -> float:
    """Heading of the direction vector (dx, dy), degrees in [0, 360)."""
    return math.degrees(math.atan2(dx, dy)) % 360.0


def heading_vector(psi_deg: float) -> tuple[float, float]:
    """Unit vector pointing along heading psi_deg."""
    r = math.radians(psi_deg)
    return math.sin(r), math.cos(r)


# ---------------------------------------------------------------------------
# track


@dataclass
class Track:
    """A closed loop of evenly spaced waypoints with a fixed lane width.

    Waypoints are stored as an (n, 2) float array; the loop closes from the
    last waypoint back to the first. Instances are treated as immutable
    after construction; derived arrays are precomputed once.
    """

    name: str
    lane_width: float
    waypoints: np.ndarray
    origin_index: int = 0

    # derived, filled in __post_init__
    seg_heading: np.ndarray = field(init=False, repr=False)
    signed_curvature: np.ndarray = field(init=False, repr=False)
    length: float = field(init=False, repr=False)
    mean_spacing: float = field(init=False, repr=False)

    def __post_init__(self) -> None:
        pts = np.asarray(self.waypoints, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError("waypoints must be an (n, 2) array")
        if len(pts) < 8:
            raise ValueError("a track needs at least 8 waypoints")
        if self.lane_width <= 0:
            raise ValueError("lane width must be positive")
        if not 0 <= self.origin_index < len(pts):
            raise ValueError("origin_index out of range")
        self.waypoints = pts

        nxt = np.roll(pts, -1, axis=0)
        deltas = nxt - pts
        spacing = np.hypot(deltas[:, 0], deltas[:, 1])
        if np.any(spacing <= 1e-9):
            raise DegenerateTriple("coincident consecutive waypoints")
        mean = float(spacing.mean())
        if np.any(np.abs(spacing - mean) > 0.10 * mean):
            raise ValueError("waypoint spacing deviates more than 10% from the mean")
        self.mean_spacing = mean
        self.length = float(spacing.sum())

        self.seg_heading = np.degrees(np.arctan2(deltas[:, 0], deltas[:, 1])) % 360.0

        # signed curvature at each waypoint from the circle through it and
        # its two neighbours; sign follows the heading change across it
        prev = np.roll(pts, 1, axis=0)
        radius = _circumradius(prev, pts, nxt)
        turn = _wrap180_array(self.seg_heading - np.roll(self.seg_heading, 1))
        with np.errstate(divide="ignore"):
            curv = np.where(np.isfinite(radius), 1.0 / radius, 0.0)
        self.signed_curvature = np.sign(turn) * curv

    @property
    def half_width(self) -> float:
        return self.lane_width / 2.0

    @property
    def n(self) -> int:
        return len(self.waypoints)

    def locate(self, x: float, y: float) -> tuple[int, float, float, float]:
        """Project a point onto the centerline.

        Returns (closest waypoint index, road heading at that waypoint,
        unsigned cross-track distance, side sign). The side sign is +1 on
        the positive-heading side of the road, -1 on the other, 0 on the
        centerline itself.
        """
        pts = self.waypoints
        d2 = (pts[:, 0] - x) ** 2 + (pts[:, 1] - y) ** 2
        i = int(np.argmin(d2))
        n = len(pts)

        best = math.inf
        side = 0.0
        for a in (i - 1, i):
            ax, ay = pts[a % n]
            bx, by = pts[(a + 1) % n]
            dx, dy = bx - ax, by - ay
            seg2 = dx * dx + dy * dy
            t = ((x - ax) * dx + (y - ay) * dy) / seg2
            t = 0.0 if t < 0.0 else (1.0 if t > 1.0 else t)
            px, py = ax + t * dx, ay + t * dy
            dist = math.hypot(x - px, y - py)
            if dist < best:
                best = dist
                cross = dx * (y - py) - dy * (x - px)
                side = -math.copysign(1.0, cross) if cross != 0.0 else 0.0
        return i, float(self.seg_heading[i]), best, side

    def curvature_ahead(self, index: int, arc_offsets: Sequence[float]) -> list[float]:
        """Signed curvature sampled at arc-length offsets ahead of a waypoint."""
        n = self.n
        out = []
        for off in arc_offsets:
            j = (index + int(round(off / self.mean_spacing))) % n
            out.append(float(self.signed_curvature[j]))
        return out


def _wrap180_array(a: np.ndarray) -> np.ndarray:
    w = np.asarray(a, dtype=float) % 360.0
    w[w > 180.0] -= 360.0
    return w


def _circumradius(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Radius of the circle through each point triple; inf where collinear."""
    ab = np.hypot(*(b - a).T)
    bc = np.hypot(*(c - b).T)
    ca = np.hypot(*(a - c).T)
    if np.any(ab <= 1e-9) or np.any(bc <= 1e-9):
        raise DegenerateTriple("coincident consecutive waypoints")
    cross = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (
        c[:, 0] - a[:, 0]
    )
    area2 = np.abs(cross)
    scale = ab * bc * ca
    with np.errstate(divide="ignore", invalid="ignore"):
        radius = np.where(area2 > 1e-12 * np.maximum(scale, 1.0), scale / (2.0 * area2), np.inf)
    return radius


# ---------------------------------------------------------------------------
# spec operations


def closest_waypoint(p: Sequence[float], track: Track) -> tuple[int, float]:
    """Index of the nearest waypoint and the road heading there.

    The road heading is the direction of the line from that waypoint to its
    successor, degrees in [0, 360) measured from the y-axis.
    """
    i, psi_cw, _, _ = track.locate(float(p[0]), float(p[1]))
    return i, psi_cw


def xte(p: Sequence[float], track: Track) -> float:
    """Unsigned cross-track distance from a point to the lane center polyline."""
    _, _, dist, _ = track.locate(float(p[0]), float(p[1]))
    return dist


def signed_xte(p: Sequence[float], track: Track) -> float:
    """Cross-track distance with side sign (positive-heading side is +)."""
    _, _, dist, side = track.locate(float(p[0]), float(p[1]))
    return dist * side


def relative_orientation(p: Sequence[float], psi_deg: float, track: Track) -> float:
    """Vehicle heading relative to the road, wrapped to (-180, 180]."""
    _, psi_cw = closest_waypoint(p, track)
    return wrap180(psi_deg - psi_cw)


def track_curvature(track: Track) -> float:
    """Largest centerline curvature: 1 / min circumradius over waypoint triples."""
    pts = track.waypoints
    radius = _circumradius(np.roll(pts, 1, axis=0), pts, np.roll(pts, -1, axis=0))
    rmin = float(radius.min())
    return 0.0 if math.isinf(rmin) else 1.0 / rmin


def count_turns(track: Track, threshold_deg: float = 5.0) -> int:
    """Number of maximal runs of consecutive direction changes above threshold.

    Direction changes are measured between consecutive segment headings; runs
    that wrap past the end of the waypoint list are merged, so a loop that
    turns everywhere counts as a single turn.
    """
    heads = track.seg_heading
    turn = np.abs(_wrap180_array(np.roll(heads, -1) - heads)) > threshold_deg
    if turn.all():
        return 1
    if not turn.any():
        return 0
    # rotate so the sequence starts outside a run, then count rising edges
    start = int(np.argmin(turn))
    rolled = np.roll(turn, -start)
    rises = np.count_nonzero(rolled[1:] & ~rolled[:-1]) + int(rolled[0])
    return int(rises)


def track_distance(a: Track, b: Track) -> float:
    """Sum of Euclidean distances between aligned waypoints.

    Alignment starts at each track's origin waypoint and walks both loops in
    their stored direction; the tracks must have the same waypoint count.
    """
    if a.n != b.n:
        raise MismatchedLength(f"waypoint counts differ: {a.n} vs {b.n}")
    ia = np.arange(a.n)
    pa = a.waypoints[(ia + a.origin_index) % a.n]
    pb = b.waypoints[(ia + b.origin_index) % b.n]
    return float(np.hypot(*(pa - pb).T).sum())


@dataclass
class TrackFeatures:
    """Shape summary of one track, optionally relative to a reference."""

    name: str
    curvature: float
    num_turns: int
    length: float
    n_waypoints: int
    distance_from_reference: float | None = None


def compute_track_features(track: Track, reference: Track | None = None) -> TrackFeatures:
    dist = None
    if reference is not None:
        dist = track_distance(reference, track)
    return TrackFeatures(
        name=track.name,
        curvature=track_curvature(track),
        num_turns=count_turns(track),
        length=track.length,
        n_waypoints=track.n,
        distance_from_reference=dist,
    )


# ---------------------------------------------------------------------------
# construction and variation


def resample_closed(points: np.ndarray, n: int) -> np.ndarray:
    """Resample a closed polyline to n points at uniform arc-length spacing."""
    pts = np.asarray(points, dtype=float)
    closed = np.vstack([pts, pts[:1]])
    seg = np.hypot(*np.diff(closed, axis=0).T)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = s[-1]
    targets = np.arange(n) * (total / n)
    out = np.empty((n, 2))
    out[:, 0] = np.interp(targets, s, closed[:, 0])
    out[:, 1] = np.interp(targets, s, closed[:, 1])
    return out


def make_training_track(
    name: str = "t1",
    lane_width: float = 4.0,
    size: tuple[float, float] = (220.0, 120.0),
    corner_radii: tuple[float, float, float, float] = (9.0, 12.0, 15.0, 11.0),
    spacing: float = 2.0,
) -> Track:
    """Build the default closed training track.

    A rounded rectangle traversed clockwise (headings increase), with four
    corners of distinct radii so the four turns differ in severity.
    """
    a, b = size
    r1, r2, r3, r4 = corner_radii  # NW, NE, SE, SW
    dense: list[tuple[float, float]] = []

    def straight(p0, p1):
        steps = max(2, int(math.hypot(p1[0] - p0[0], p1[1] - p0[1]) / 0.25))
        for t in np.linspace(0.0, 1.0, steps, endpoint=False):
            dense.append((p0[0] + t * (p1[0] - p0[0]), p0[1] + t * (p1[1] - p0[1])))

    def corner(center, radius, start_deg, end_deg):
        steps = max(4, int(radius * math.radians(abs(end_deg - start_deg)) / 0.25))
        for t in np.linspace(0.0, 1.0, steps, endpoint=False):
            ang = math.radians(start_deg + t * (end_deg - start_deg))
            dense.append((center[0] + radius * math.cos(ang), center[1] + radius * math.sin(ang)))

    straight((0.0, r4), (0.0, b - r1))
    corner((r1, b - r1), r1, 180.0, 90.0)
    straight((r1, b), (a - r2, b))
    corner((a - r2, b - r2), r2, 90.0, 0.0)
    straight((a, b - r2), (a, r3))
    corner((a - r3, r3), r3, 0.0, -90.0)
    straight((a - r3, 0.0), (r4, 0.0))
    corner((r4, r4), r4, -90.0, -180.0)

    pts = np.array(dense)
    perimeter = float(np.hypot(*np.diff(np.vstack([pts, pts[:1]]), axis=0).T).sum())
    n = int(round(perimeter / spacing))
    return Track(name=name, lane_width=lane_width, waypoints=resample_closed(pts, n))


def mirror_track(track: Track, name: str | None = None) -> Track:
    """Reflect a track across the y-axis; deterministic, shape metrics unchanged."""
    pts = track.waypoints.copy()
    pts[:, 0] = -pts[:, 0]
    return Track(
        name=name if name is not None else track.name + "_mirror",
        lane_width=track.lane_width,
        waypoints=pts,
        origin_index=track.origin_index,
    )


def generate_evaluation_track(
    base: Track,
    rng: np.random.Generator,
    max_distance: float,
    attempts: int = 200,
    sigma: float = 1.0,
    window: tuple[int, int] = (2, 5),
    max_curvature: float | None = None,
    fill: float = 0.8,
    name: str = "eval",
) -> Track:
    """Mutate the base track into a nearby but strictly more challenging one.

    Each step displaces a contiguous window of 2-5 waypoints laterally by a
    tapered Gaussian offset (sigma meters at the center), re-closes and
    resamples the loop. Steps accumulate — a step is kept only while the
    candidate stays within max_distance of the base and under the optional
    curvature ceiling — until the displacement budget is `fill` used or the
    attempt budget runs out. The result must still raise curvature or add
    turns relative to the base; the ceiling keeps it physically drivable.
    """
    base_curv = track_curvature(base)
    base_turns = count_turns(base)
    n = base.n
    cand = base
    for _ in range(attempts):
        if track_distance(base, cand) >= fill * max_distance:
            break
        k = int(rng.integers(window[0], window[1] + 1))
        start = int(rng.integers(0, n))
        amp = float(rng.normal(0.0, sigma))
        pts = cand.waypoints.copy()
        for j in range(k):
            i = (start + j) % n
            taper = math.sin(math.pi * (j + 1) / (k + 1))
            h = math.radians(cand.seg_heading[i])
            # lateral unit vector toward the positive-heading side
            nx, ny = math.cos(h), -math.sin(h)
            pts[i, 0] += amp * taper * nx
            pts[i, 1] += amp * taper * ny
        try:
            step = Track(
                name=name,
                lane_width=base.lane_width,
                waypoints=resample_closed(pts, n),
                origin_index=base.origin_index,
            )
        except (ValueError, DegenerateTriple):
            continue
        if max_curvature is not None and track_curvature(step) > max_curvature:
            continue
        if track_distance(base, step) > max_distance:
            continue
        cand = step
    if cand is not base and (
        track_curvature(cand) > base_curv or count_turns(cand) > base_turns
    ):
        return cand
    raise BudgetExhausted(f"no acceptable track variant in {attempts} attempts")


# ---------------------------------------------------------------------------
# serialization


def track_to_dict(track: Track) -> dict:
    return {
        "name": track.name,
        "lane_width_m": track.lane_width,
        "closed": True,
        "origin_index": track.origin_index,
        "waypoints": [[round(float(x), 6), round(float(y), 6)] for x, y in track.waypoints],
    }


def track_from_dict(d: dict) -> Track:
    return Track(
        name=d["name"],
        lane_width=float(d["lane_width_m"]),
        waypoints=np.array(d["waypoints"], dtype=float),
        origin_index=int(d.get("origin_index", 0)),
    )


def save_track(track: Track, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(track_to_dict(track), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_track(path: str) -> Track:
    with open(path, "r", encoding="utf-8") as fh:
        return track_from_dict(json.load(fh))

"""Boundary state machinery: closeness, validity, and mutation operators.

A state pair holds two nearby valid states; mutation pushes a state toward
more challenging driving conditions without ever breaking closeness to its
anchor or validity on the track. Every operator enforces the full contract
on its output: cross-track distance, speed, and absolute relative heading
never decrease, at least one strictly increases, and the result stays close
and valid. Operators report failure by returning None; failure is a normal
outcome of rejection sampling, not an error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dynamics import VehicleState
from .geometry import Track, circular_distance, wrap180, wrap360


class NoValidState(RuntimeError):
    """Raised when a trace contains no valid state to seed from."""


@dataclass(frozen=True)
class ClosenessBudget:
    """Componentwise closeness thresholds between two states."""

    eps_p: float = 0.4  # m
    eps_v: float = 3.0  # km/h
    eps_psi: float = 7.2  # deg


@dataclass(frozen=True)
class ValidityLimits:
    """State validity bounds (the lane bound comes from the track)."""

    v_max_kmh: float = 30.0
    theta_max_deg: float = 20.0


@dataclass(frozen=True)
class StatePair:
    """Two close valid states; by convention s2 is the more challenging."""

    s1: VehicleState
    s2: VehicleState


# ---------------------------------------------------------------------------
# distances, validity, seeding


def state_distance(
    si: VehicleState, sj: VehicleState
) -> tuple[float, float, float]:
    """Componentwise distance (position m, speed km/h, heading deg).

    The heading component is the minimal circular arc, so 350 and 5 are 15
    degrees apart.
    """
    dp = math.hypot(si.x - sj.x, si.y - sj.y)
    dv = abs(si.v_kmh - sj.v_kmh)
    dpsi = circular_distance(si.psi_deg, sj.psi_deg)
    return dp, dv, dpsi


def is_close(si: VehicleState, sj: VehicleState, eps: ClosenessBudget) -> bool:
    dp, dv, dpsi = state_distance(si, sj)
    return dp <= eps.eps_p and dv <= eps.eps_v and dpsi <= eps.eps_psi


def challenge(s: VehicleState, track: Track) -> tuple[float, float, float]:
    """The challenge triple (xte, v, |theta|) that mutation must not lower."""
    _, psi_cw, dist, _ = track.locate(s.x, s.y)
    return dist, s.v_kmh, abs(wrap180(s.psi_deg - psi_cw))


def is_valid_state(s: VehicleState, track: Track, limits: ValidityLimits) -> bool:
    """Inside the lane, within the speed limit, roughly road-aligned."""
    _, psi_cw, dist, _ = track.locate(s.x, s.y)
    if dist > track.half_width:
        return False
    if s.v_kmh > limits.v_max_kmh or s.v_kmh < 0.0:
        return False
    return abs(wrap180(s.psi_deg - psi_cw)) <= limits.theta_max_deg


def sample_valid_state(
    trace: Sequence[VehicleState],
    rng: np.random.Generator,
    track: Track,
    limits: ValidityLimits,
) -> VehicleState:
    """Uniformly sample a valid state from a trace of states."""
    if len(trace) == 0:
        raise NoValidState("empty trace")
    for _ in range(4 * len(trace)):
        s = trace[int(rng.integers(0, len(trace)))]
        if is_valid_state(s, track, limits):
            return s
    valid = [s for s in trace if is_valid_state(s, track, limits)]
    if not valid:
        raise NoValidState("trace contains no valid state")
    return valid[int(rng.integers(0, len(valid)))]


# ---------------------------------------------------------------------------
# angular ranges


@dataclass(frozen=True)
class AngularRange:
    """The arc from lo to hi in increasing-angle direction, possibly wrapping
    past 360. lo == hi denotes the full circle; arc length is in (0, 360]."""

    lo: float
    hi: float

    def measure(self) -> float:
        if self.lo == self.hi:
            return 360.0
        return (self.hi - self.lo) % 360.0

    def contains(self, angle_deg: float) -> bool:
        if self.lo == self.hi:
            return True
        a = (angle_deg - self.lo) % 360.0
        return a <= (self.hi - self.lo) % 360.0


def _linear_pieces(r: AngularRange) -> list[tuple[float, float]]:
    if r.lo < r.hi:
        return [(r.lo, r.hi)]
    if r.lo > r.hi:
        return [(r.lo, 360.0), (0.0, r.hi)]
    return [(0.0, 360.0)]


def intersect_angular_ranges(a: AngularRange, b: AngularRange) -> list[AngularRange]:
    """Intersection of two arcs: zero, one, or two arcs, sorted by start.

    Zero-length touching points are dropped; arcs that meet at the 360/0 seam
    are merged back into a single wrapping arc.
    """
    pieces = []
    for a1, a2 in _linear_pieces(a):
        for b1, b2 in _linear_pieces(b):
            lo, hi = max(a1, b1), min(a2, b2)
            if lo < hi:
                pieces.append((lo, hi))
    if not pieces:
        return []
    total = sum(hi - lo for lo, hi in pieces)
    if total >= 360.0:
        return [AngularRange(0.0, 0.0)]
    ends_at_seam = [p for p in pieces if p[1] == 360.0]
    starts_at_seam = [p for p in pieces if p[0] == 0.0]
    if ends_at_seam and starts_at_seam:
        merged = (ends_at_seam[0][0], starts_at_seam[0][1])
        pieces = [p for p in pieces if p not in (ends_at_seam[0], starts_at_seam[0])]
        pieces.append(merged)
    out = [
        AngularRange(wrap360(lo), wrap360(hi) if hi != 360.0 else 0.0)
        for lo, hi in pieces
    ]
    return sorted(out, key=lambda r: r.lo)


def sample_angular(
    ranges: Sequence[AngularRange], rng: np.random.Generator
) -> float:
    """Uniform draw over the union of arcs, weighted by arc length."""
    measures = [r.measure() for r in ranges]
    total = sum(measures)
    u = rng.uniform(0.0, total)
    for r, m in zip(ranges, measures):
        if u <= m:
            return wrap360(r.lo + u)
        u -= m
    return wrap360(ranges[-1].lo + measures[-1])


# ---------------------------------------------------------------------------
# mutation operators


def _accept(
    candidate: VehicleState,
    base_triple: tuple[float, float, float],
    sj: VehicleState,
    track: Track,
    limits: ValidityLimits,
    eps: ClosenessBudget,
    strict_index: int,
) -> bool:
    """Full output contract: componentwise non-decrease with a strict gain on
    the mutated component, closeness to the anchor, validity."""
    cand = challenge(candidate, track)
    if cand[0] < base_triple[0] or cand[1] < base_triple[1] or cand[2] < base_triple[2]:
        return False
    if not cand[strict_index] > base_triple[strict_index]:
        return False
    if cand[0] > track.half_width or cand[1] > limits.v_max_kmh:
        return False
    if cand[2] > limits.theta_max_deg:
        return False
    return is_close(candidate, sj, eps)


def mutate_position(
    si: VehicleState,
    sj: VehicleState,
    track: Track,
    rng: np.random.Generator,
    limits: ValidityLimits,
    eps: ClosenessBudget,
    budget: int = 20,
) -> VehicleState | None:
    """Move si's position to strictly increase cross-track distance.

    One axis is drawn per attempt with equal probability; its new component
    is sampled within eps_p of si's, and the other component is sampled from
    the interval that keeps the candidate within eps_p of sj's position.
    """
    base = challenge(si, track)
    for _ in range(budget):
        if rng.integers(0, 2) == 0:
            px = si.x + rng.uniform(-eps.eps_p, eps.eps_p)
            dx = px - sj.x
            h2 = eps.eps_p * eps.eps_p - dx * dx
            if h2 <= 0.0:
                continue
            h = math.sqrt(h2)
            py = sj.y + rng.uniform(-h, h)
        else:
            py = si.y + rng.uniform(-eps.eps_p, eps.eps_p)
            dy = py - sj.y
            h2 = eps.eps_p * eps.eps_p - dy * dy
            if h2 <= 0.0:
                continue
            h = math.sqrt(h2)
            px = sj.x + rng.uniform(-h, h)
        candidate = VehicleState(px, py, si.psi_deg, si.v_kmh)
        if _accept(candidate, base, sj, track, limits, eps, strict_index=0):
            return candidate
    return None


def mutate_orientation(
    si: VehicleState,
    sj: VehicleState,
    track: Track,
    rng: np.random.Generator,
    limits: ValidityLimits,
    eps: ClosenessBudget,
    budget: int = 20,
) -> VehicleState | None:
    """Rotate si's heading to strictly increase |theta|.

    Candidate headings are drawn from the intersection of the closeness arc
    around sj's heading with the validity arc around the road heading; the
    intersection being empty is an immediate failure.
    """
    _, psi_cw, _, _ = track.locate(si.x, si.y)
    closeness = AngularRange(
        wrap360(sj.psi_deg - eps.eps_psi), wrap360(sj.psi_deg + eps.eps_psi)
    )
    validity = AngularRange(
        wrap360(psi_cw - limits.theta_max_deg),
        wrap360(psi_cw + limits.theta_max_deg),
    )
    arcs = intersect_angular_ranges(closeness, validity)
    if not arcs:
        return None
    base = challenge(si, track)
    for _ in range(budget):
        psi = sample_angular(arcs, rng)
        candidate = VehicleState(si.x, si.y, psi, si.v_kmh)
        if _accept(candidate, base, sj, track, limits, eps, strict_index=2):
            return candidate
    return None


def mutate_velocity(
    si: VehicleState,
    sj: VehicleState,
    rng: np.random.Generator,
    limits: ValidityLimits,
    eps: ClosenessBudget,
) -> VehicleState | None:
    """Raise si's speed within closeness of sj and the speed limit.

    The feasible interval is (v_i, min(v_j + eps_v, v_max)]; an empty
    interval is an immediate failure.
    """
    hi = min(sj.v_kmh + eps.eps_v, limits.v_max_kmh)
    if si.v_kmh >= hi:
        return None
    u = rng.uniform(0.0, 1.0)
    v = hi - u * (hi - si.v_kmh)  # lands in (v_i, hi]
    if v <= si.v_kmh:  # guard the open end against rounding
        return None
    return VehicleState(si.x, si.y, si.psi_deg, v)


_OPS = ("position", "orientation", "velocity")


def mutate_state(
    si: VehicleState,
    sj: VehicleState,
    track: Track,
    rng: np.random.Generator,
    limits: ValidityLimits,
    eps: ClosenessBudget,
    budget: int = 20,
    follower_prob: float = 0.3,
    record: list[str] | None = None,
) -> VehicleState | None:
    """Composite mutation: one operator drawn uniformly, then each remaining
    operator independently with the follower probability, chained on the
    running state. Succeeds when at least one applied operator succeeded.

    When seeding a fresh pair, call with sj = si.
    """
    first = _OPS[int(rng.integers(0, 3))]
    plan = [first] + [
        op for op in _OPS if op != first and rng.uniform(0.0, 1.0) < follower_prob
    ]
    current = si
    succeeded = False
    for op in plan:
        if record is not None:
            record.append(op)
        if op == "position":
            out = mutate_position(current, sj, track, rng, limits, eps, budget)
        elif op == "orientation":
            out = mutate_orientation(current, sj, track, rng, limits, eps, budget)
        else:
            out = mutate_velocity(current, sj, rng, limits, eps)
        if out is not None:
            current = out
            succeeded = True
    return current if succeeded else None


def mutate_pair(
    pair: StatePair,
    track: Track,
    rng: np.random.Generator,
    limits: ValidityLimits,
    eps: ClosenessBudget,
    budget: int = 20,
) -> StatePair | None:
    """Mutate a pair by pushing s2 harder and translating s1 by the same delta.

    s2 is mutated against s1 as the closeness anchor; the componentwise delta
    (position vector, minimal heading rotation, speed change) is then applied
    to s1. Both states are discarded when the shifted s1 leaves validity, and
    the attempt repeats until the budget runs out. The delta preserves every
    pairwise distance, so the new pair is exactly as close as the old one.
    """
    for _ in range(budget):
        new_s2 = mutate_state(pair.s2, pair.s1, track, rng, limits, eps, budget)
        if new_s2 is None:
            continue
        dx = new_s2.x - pair.s2.x
        dy = new_s2.y - pair.s2.y
        dpsi = wrap180(new_s2.psi_deg - pair.s2.psi_deg)
        dv = new_s2.v_kmh - pair.s2.v_kmh
        new_s1 = VehicleState(
            pair.s1.x + dx,
            pair.s1.y + dy,
            wrap360(pair.s1.psi_deg + dpsi),
            pair.s1.v_kmh + dv,
        )
        if is_valid_state(new_s1, track, limits):
            return StatePair(new_s1, new_s2)
    return None

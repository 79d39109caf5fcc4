"""Vehicle model and episode execution.

A kinematic bicycle advances at a fixed simulation rate. The only source of
nondeterminism is optional Gaussian observation noise, seeded per episode;
with noise disabled an episode is a pure function of its inputs.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np

from .geometry import Track, heading_of, wrap180


class ModelFailure(RuntimeError):
    """Raised when a model fails an episode it was required to pass."""

    def __init__(self, message: str, result: "EpisodeResult" | None = None):
        super().__init__(message)
        self.result = result


# arc-length offsets (meters) at which road curvature is sampled ahead
LOOKAHEAD_OFFSETS: tuple[float, ...] = (2.0, 4.0, 6.0, 8.0, 10.0)


@dataclass(frozen=True, slots=True)
class VehicleState:
    """Pose and speed: absolute position (m), heading (deg in [0, 360)
    measured from the y-axis), speed (km/h, never negative)."""

    x: float
    y: float
    psi_deg: float
    v_kmh: float

    @property
    def p(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True, slots=True)
class SimConfig:
    """Simulator constants. Defaults give a 20 fps run with speeds between
    10 and 30 km/h and full steering lock of 25 degrees."""

    fps: float = 20.0
    wheelbase_m: float = 2.5
    max_steer_deg: float = 25.0
    v_min_kmh: float = 10.0
    v_max_kmh: float = 30.0
    speed_gain: float = 1.0  # 1/s, proportional relaxation toward target speed
    t_min_steps: int = 250
    nominal_steps: int = 1200
    eval_steps: int = 600

    @property
    def dt(self) -> float:
        return 1.0 / self.fps


class Observation(NamedTuple):
    """What a controller sees at one step."""

    xte_signed: float  # m, positive on the positive-heading side of the road
    theta_deg: float  # heading relative to the road, (-180, 180]
    v_kmh: float
    curvatures: tuple[float, ...]  # signed, sampled ahead along the centerline

    def as_array(self) -> np.ndarray:
        return np.array((self.xte_signed, self.theta_deg, self.v_kmh) + self.curvatures)


def extract_features(state: VehicleState, track: Track) -> Observation:
    """Deterministic observation of a state on a track."""
    idx, psi_cw, dist, side = track.locate(state.x, state.y)
    theta = wrap180(state.psi_deg - psi_cw)
    curv = track.curvature_ahead(idx, LOOKAHEAD_OFFSETS)
    return Observation(dist * side, theta, state.v_kmh, tuple(curv))


def target_speed(steer: float, cfg: SimConfig) -> float:
    """Commanded speed for a steering command: full speed straight ahead,
    linearly down to the minimum at full lock."""
    s = min(1.0, abs(steer))
    return cfg.v_max_kmh - s * (cfg.v_max_kmh - cfg.v_min_kmh)


def step_vehicle(state: VehicleState, steer: float, cfg: SimConfig) -> VehicleState:
    """Advance one simulation step with a steering command in [-1, 1]."""
    s = -1.0 if steer < -1.0 else (1.0 if steer > 1.0 else steer)
    dt = 1.0 / cfg.fps
    v_mps = state.v_kmh / 3.6
    r = math.radians(state.psi_deg)
    x = state.x + v_mps * dt * math.sin(r)
    y = state.y + v_mps * dt * math.cos(r)
    rate = (v_mps / cfg.wheelbase_m) * math.tan(math.radians(s * cfg.max_steer_deg))
    psi = (state.psi_deg + math.degrees(rate) * dt) % 360.0
    v = state.v_kmh + cfg.speed_gain * (target_speed(s, cfg) - state.v_kmh) * dt
    v = 0.0 if v < 0.0 else (cfg.v_max_kmh if v > cfg.v_max_kmh else v)
    return VehicleState(x, y, psi, v)


class TraceRow(NamedTuple):
    state: VehicleState
    steer: float  # nan on rows where no command was issued
    xte: float
    theta_deg: float


@dataclass
class EpisodeResult:
    success: bool
    steps_in_lane: int
    max_xte: float
    trace: list[TraceRow]


def nominal_start(track: Track) -> VehicleState:
    """Standing start on the origin waypoint, aligned with the road."""
    i = track.origin_index
    x, y = track.waypoints[i]
    nx, ny = track.waypoints[(i + 1) % track.n]
    return VehicleState(float(x), float(y), heading_of(nx - x, ny - y), 0.0)


def run_episode(
    model,
    track: Track,
    start: VehicleState,
    success_steps: int,
    cfg: SimConfig,
    noise_sigma: float = 0.0,
    noise_seed: int | None = None,
    keep_trace: bool = True,
) -> EpisodeResult:
    """Drive from a start state until leaving the lane or reaching the budget.

    The episode succeeds iff the vehicle completes success_steps steps with
    cross-track distance never exceeding half the lane width; a start already
    out of bounds fails immediately with zero steps. When noise_sigma > 0,
    zero-mean Gaussian noise is added to every observation component before
    the model sees it, drawn from a generator seeded per episode.
    """
    policy = model.fresh()
    rng = np.random.default_rng(noise_seed) if noise_sigma > 0.0 else None
    half_width = track.half_width
    locate = track.locate
    curv_list = track.signed_curvature.tolist()
    n = track.n
    spacing = track.mean_spacing
    deltas = [int(round(off / spacing)) for off in LOOKAHEAD_OFFSETS]

    state = start
    steps = 0
    max_xte = 0.0
    trace: list[TraceRow] = []
    while True:
        idx, psi_cw, dist, side = locate(state.x, state.y)
        theta = wrap180(state.psi_deg - psi_cw)
        if dist > max_xte:
            max_xte = dist
        if dist > half_width:
            if keep_trace:
                trace.append(TraceRow(state, math.nan, dist, theta))
            return EpisodeResult(False, steps, max_xte, trace)
        if steps >= success_steps:
            if keep_trace:
                trace.append(TraceRow(state, math.nan, dist, theta))
            return EpisodeResult(True, steps, max_xte, trace)
        obs = Observation(
            dist * side,
            theta,
            state.v_kmh,
            tuple(curv_list[(idx + d) % n] for d in deltas),
        )
        if rng is not None:
            noise = rng.normal(0.0, noise_sigma, 8)
            obs = Observation(
                obs.xte_signed + noise[0],
                obs.theta_deg + noise[1],
                obs.v_kmh + noise[2],
                tuple(c + e for c, e in zip(obs.curvatures, noise[3:])),
            )
        steer = policy.predict(obs)
        if keep_trace:
            trace.append(TraceRow(state, steer, dist, theta))
        state = step_vehicle(state, steer, cfg)
        steps += 1


def drive_nominal(
    model,
    track: Track,
    cfg: SimConfig,
    noise_sigma: float = 0.0,
    noise_seed: int | None = None,
    keep_trace: bool = True,
) -> EpisodeResult:
    """Nominal-lap gate: from the nominal start, the model must stay in lane
    for the nominal step budget. Raises ModelFailure otherwise."""
    result = run_episode(
        model,
        track,
        nominal_start(track),
        cfg.nominal_steps,
        cfg,
        noise_sigma=noise_sigma,
        noise_seed=noise_seed,
        keep_trace=keep_trace,
    )
    if not result.success:
        raise ModelFailure(
            f"model left the lane after {result.steps_in_lane} steps", result
        )
    return result


TRACE_HEADER = ["step", "x", "y", "psi_deg", "v_kmh", "steer", "xte", "theta_deg"]


def write_trace_csv(trace: Iterable[TraceRow], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_HEADER)
        for i, row in enumerate(trace):
            s = row.state
            writer.writerow(
                [
                    i,
                    f"{s.x:.6f}",
                    f"{s.y:.6f}",
                    f"{s.psi_deg:.6f}",
                    f"{s.v_kmh:.6f}",
                    "nan" if math.isnan(row.steer) else f"{row.steer:.6f}",
                    f"{row.xte:.6f}",
                    f"{row.theta_deg:.6f}",
                ]
            )


def read_trace_csv(path: str) -> list[TraceRow]:
    rows: list[TraceRow] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != TRACE_HEADER:
            raise ValueError(f"unexpected trace header: {header}")
        for r in reader:
            state = VehicleState(float(r[1]), float(r[2]), float(r[3]), float(r[4]))
            rows.append(TraceRow(state, float(r[5]), float(r[6]), float(r[7])))
    return rows

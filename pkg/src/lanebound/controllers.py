"""Driving controllers: a tunable PID autopilot and a learned steering model.

The autopilot is the labeling oracle: it drives from global track knowledge
and its steering commands become regression targets. The learned model is
ridge regression on a degree-2 polynomial expansion of the observation and
is the subject under test everywhere else in the package.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .dynamics import (
    LOOKAHEAD_OFFSETS,
    Observation,
    SimConfig,
    TraceRow,
    extract_features,
    nominal_start,
    drive_nominal,
    step_vehicle,
)
from .geometry import Track, wrap180

__all__ = [
    "Observation",
    "extract_features",
    "LabeledSample",
    "Dataset",
    "PIDAutopilot",
    "LearnedModel",
    "Hyperparams",
    "AutopilotFailed",
    "InsufficientData",
    "SingularSystem",
    "predict_steer",
    "fit_ridge",
    "split_indices",
    "fit_model",
    "fit_on_split",
    "train_ladder",
    "tune_autopilot",
    "collect_reference_trace",
    "save_model",
    "load_model",
    "dataset_to_csv",
    "dataset_from_csv",
]


class AutopilotFailed(RuntimeError):
    """Raised when the autopilot cannot drive the track acceptably."""


class InsufficientData(ValueError):
    """Raised when a dataset is too small to fit a model."""


class SingularSystem(RuntimeError):
    """Raised when the ridge normal equations cannot be solved."""


# ---------------------------------------------------------------------------
# datasets


class LabeledSample(NamedTuple):
    obs: Observation
    steer: float
    provenance: str = "nominal"


@dataclass
class Dataset:
    """An ordered collection of labeled observations."""

    samples: list[LabeledSample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset([self.samples[i] for i in indices])

    def merged(self, other: "Dataset") -> "Dataset":
        return Dataset(list(self.samples) + list(other.samples))

    def to_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        n = len(self.samples)
        u = np.empty((n, 3 + len(LOOKAHEAD_OFFSETS)))
        y = np.empty(n)
        for i, s in enumerate(self.samples):
            u[i, 0] = s.obs.xte_signed
            u[i, 1] = s.obs.theta_deg
            u[i, 2] = s.obs.v_kmh
            u[i, 3:] = s.obs.curvatures
            y[i] = s.steer
        return u, y


DATASET_HEADER = ["xte", "theta_deg", "v_kmh"] + [
    f"c{i + 1}" for i in range(len(LOOKAHEAD_OFFSETS))
] + ["steer", "provenance"]


def dataset_to_csv(data: Dataset, path: str) -> None:
    import csv

    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(DATASET_HEADER)
        for s in data.samples:
            writer.writerow(
                [f"{s.obs.xte_signed:.6f}", f"{s.obs.theta_deg:.6f}", f"{s.obs.v_kmh:.6f}"]
                + [f"{c:.6f}" for c in s.obs.curvatures]
                + [f"{s.steer:.6f}", s.provenance]
            )


def dataset_from_csv(path: str) -> Dataset:
    import csv

    k = len(LOOKAHEAD_OFFSETS)
    samples = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != DATASET_HEADER:
            raise ValueError(f"unexpected dataset header: {header}")
        for row in reader:
            obs = Observation(
                float(row[0]), float(row[1]), float(row[2]),
                tuple(float(c) for c in row[3 : 3 + k]),
            )
            samples.append(LabeledSample(obs, float(row[3 + k]), row[4 + k]))
    return Dataset(samples)


# ---------------------------------------------------------------------------
# PID autopilot


@dataclass
class PIDAutopilot:
    """Cross-track PID with a heading alignment term.

    steering = -(kp*xte + ki*integral(xte) + kd*d(xte)/dt + kh*theta/90),
    clamped to [-1, 1]. The integral is clamped so its contribution never
    exceeds one full steering unit, and state resets per episode via fresh().
    """

    kp: float = 0.5
    ki: float = 0.05
    kd: float = 0.25
    kh: float = 2.0
    dt: float = 0.05

    name: str = "autopilot"
    kind: str = "autopilot"

    _integral: float = field(default=0.0, repr=False)
    _prev_xte: float | None = field(default=None, repr=False)

    def fresh(self) -> "PIDAutopilot":
        return PIDAutopilot(self.kp, self.ki, self.kd, self.kh, self.dt, name=self.name)

    def predict(self, obs: Observation) -> float:
        e = obs.xte_signed
        if self.ki > 1e-12:
            cap = 1.0 / self.ki
            self._integral = min(cap, max(-cap, self._integral + e * self.dt))
        d = 0.0 if self._prev_xte is None else (e - self._prev_xte) / self.dt
        self._prev_xte = e
        u = -(
            self.kp * e
            + self.ki * self._integral
            + self.kd * d
            + self.kh * obs.theta_deg / 90.0
        )
        return -1.0 if u < -1.0 else (1.0 if u > 1.0 else u)

    def gains(self) -> dict:
        return {"kp": self.kp, "ki": self.ki, "kd": self.kd, "kh": self.kh}


def predict_steer(
    model,
    obs: Observation,
    noise_sigma: float = 0.0,
    rng: np.random.Generator | None = None,
) -> float:
    """Single-shot steering query, optionally with observation noise.

    Stateful controllers answer from a fresh instance, so this is a pure
    function of (model, observation, noise draw).
    """
    if noise_sigma > 0.0:
        if rng is None:
            raise ValueError("noise_sigma > 0 requires an rng")
        noise = rng.normal(0.0, noise_sigma, 3 + len(obs.curvatures))
        obs = Observation(
            obs.xte_signed + noise[0],
            obs.theta_deg + noise[1],
            obs.v_kmh + noise[2],
            tuple(c + e for c, e in zip(obs.curvatures, noise[3:])),
        )
    u = model.fresh().predict(obs)
    return -1.0 if u < -1.0 else (1.0 if u > 1.0 else u)


# ---------------------------------------------------------------------------
# learned model

_N_RAW = 3 + len(LOOKAHEAD_OFFSETS)
_IU = np.triu_indices(_N_RAW)

# exploration-burst shape during data collection: per-step start probability,
# [lo, hi) step-count range, and the cross-track tube outside which a burst
# is released back to the autopilot
_BURST_RATE = 0.03
_BURST_LEN = (4, 8)
_BURST_TUBE = 0.4


@dataclass(frozen=True)
class Hyperparams:
    ridge_lambda: float = 40.0
    val_fraction: float = 0.2
    degree: int = 2  # fixed polynomial degree of the feature expansion


@dataclass
class LearnedModel:
    """Ridge regression over degree-2 polynomial features of the observation."""

    weights: np.ndarray
    mu: np.ndarray
    scale: np.ndarray
    ridge_lambda: float
    seed: int
    validation_loss: float
    name: str = "model"
    kind: str = "ridge_poly2"
    # the split this model was actually fitted on, recorded so retraining can
    # keep the original validation samples intact
    train_idx: np.ndarray | None = None
    val_idx: np.ndarray | None = None

    def fresh(self) -> "LearnedModel":
        return self  # stateless

    def _phi(self, u: np.ndarray) -> np.ndarray:
        z = (u - self.mu) / self.scale
        quad = np.outer(z, z)[_IU]
        return np.concatenate(([1.0], z, quad))

    def raw_predict(self, obs: Observation) -> float:
        u = np.array((obs.xte_signed, obs.theta_deg, obs.v_kmh) + obs.curvatures)
        return float(self.weights @ self._phi(u))

    def predict(self, obs: Observation) -> float:
        u = self.raw_predict(obs)
        return -1.0 if u < -1.0 else (1.0 if u > 1.0 else u)


def _expand(u: np.ndarray, mu: np.ndarray, scale: np.ndarray) -> np.ndarray:
    z = (u - mu) / scale
    quad = z[:, _IU[0]] * z[:, _IU[1]]
    ones = np.ones((len(z), 1))
    return np.hstack([ones, z, quad])


def fit_ridge(phi: np.ndarray, y: np.ndarray, lam: float) -> np.ndarray:
    """Solve the ridge normal equations; the intercept is not penalized."""
    d = phi.shape[1]
    penalty = np.eye(d) * lam
    penalty[0, 0] = 0.0
    try:
        return np.linalg.solve(phi.T @ phi + penalty, phi.T @ y)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from exc


def split_indices(
    n: int, seed: int, val_fraction: float = 0.2
) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic train/validation split of range(n)."""
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * val_fraction))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def fit_on_split(
    data: Dataset,
    train_idx: Sequence[int],
    val_idx: Sequence[int],
    hp: Hyperparams,
    seed: int,
    name: str = "model",
) -> LearnedModel:
    """Fit on an explicit split; standardization constants come from train."""
    u, y = data.to_arrays()
    ut, yt = u[np.asarray(train_idx)], y[np.asarray(train_idx)]
    uv, yv = u[np.asarray(val_idx)], y[np.asarray(val_idx)]
    mu = ut.mean(axis=0)
    scale = ut.std(axis=0)
    scale[scale < 1e-9] = 1.0
    w = fit_ridge(_expand(ut, mu, scale), yt, hp.ridge_lambda)
    val_pred = _expand(uv, mu, scale) @ w
    val_loss = float(np.mean((val_pred - yv) ** 2)) if len(yv) else math.nan
    return LearnedModel(
        w, mu, scale, hp.ridge_lambda, seed, val_loss, name=name,
        train_idx=np.asarray(train_idx, dtype=int),
        val_idx=np.asarray(val_idx, dtype=int),
    )


def fit_model(data: Dataset, hp: Hyperparams, seed: int, name: str = "model") -> LearnedModel:
    """Fit with a seeded 80/20 split of the dataset."""
    if len(data) < 50:
        raise InsufficientData(f"need at least 50 samples, got {len(data)}")
    train_idx, val_idx = split_indices(len(data), seed, hp.val_fraction)
    return fit_on_split(data, train_idx, val_idx, hp, seed, name=name)


def _combine_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(parts).generate_state(1)[0])


def train_ladder(
    data: Dataset,
    hp: Hyperparams,
    track: Track,
    cfg: SimConfig,
    seed: int,
    fractions: Sequence[float] = (0.1, 0.3, 0.6, 1.0),
    max_redraws: int = 8,
) -> list[LearnedModel]:
    """Train the model quality ladder on nested fractions of the dataset.

    One seeded 80/20 split reserves a validation set shared by every tier,
    so the recorded losses are directly comparable along the ladder. Each
    tier trains on a chronological prefix of the remaining samples — the
    first 10% of the drive, the first 30%, and so on — so each tier's data
    is a superset of the previous tier's. Every tier must pass the
    nominal-lap gate; if one fails, the split is redrawn with a new seed
    and the ladder refit.
    """
    n = len(data)
    for attempt in range(max_redraws):
        train_pool, val_common = split_indices(
            n, _combine_seed(seed, 0x5B17, attempt), hp.val_fraction
        )
        ladder = []
        for ti, frac in enumerate(fractions):
            count = max(50, int(round(frac * len(train_pool))))
            tier_idx = train_pool[:count]
            fit_seed = _combine_seed(seed, ti, attempt)
            candidate = fit_on_split(data, tier_idx, val_common, hp, fit_seed, name=f"m{ti + 1}")
            try:
                drive_nominal(candidate, track, cfg, keep_trace=False)
            except Exception:
                break
            ladder.append(candidate)
        else:
            return ladder
    raise AutopilotFailed(
        f"tier {len(ladder) + 1} failed the nominal gate after {max_redraws} redraws"
    )


# ---------------------------------------------------------------------------
# autopilot tuning and reference data collection


def _drive_laps(
    autopilot: PIDAutopilot,
    track: Track,
    cfg: SimConfig,
    laps: float,
    collect: bool = False,
    explore_amplitude: float = 0.0,
    label_noise: float = 0.0,
    label_noise_decay: float = 1.0,
    label_noise_hold: int = 1,
    sample_stride: int = 1,
    rng: np.random.Generator | None = None,
) -> tuple[bool, float, int, list[TraceRow], list[LabeledSample]]:
    """Drive whole laps with the autopilot, tracking lap progress by
    unwrapped waypoint index. Returns (completed, mean |xte|, steps, trace,
    samples).

    With explore_amplitude > 0, short seeded bursts override the executed
    steering (never the recorded label) so the vehicle sweeps a wide lateral
    envelope while every visited state is still labeled with the autopilot's
    corrective command. label_noise > 0 adds zero-mean Gaussian jitter to
    that command — recorded and executed alike, the way an imperfect
    demonstrator would drive — so imitation quality improves with the
    amount of data averaged over. label_noise_decay < 1 shrinks the jitter
    every completed lap beyond the first label_noise_hold laps: the
    demonstration stays uniformly sloppy through the warm-up laps, then
    settles rapidly, so a chronological prefix of the data is noisier per
    sample than the whole. sample_stride > 1 labels only every stride-th
    frame, the way a recording rig slower than the simulation would.
    """
    policy = autopilot.fresh()
    state = nominal_start(track)
    n = track.n
    half = n // 2
    goal = laps * n
    max_steps = int(goal * track.mean_spacing / (cfg.v_min_kmh / 3.6) * cfg.fps * 1.5)
    locate = track.locate
    curv_list = track.signed_curvature.tolist()
    spacing = track.mean_spacing
    deltas = [int(round(off / spacing)) for off in LOOKAHEAD_OFFSETS]

    if (explore_amplitude > 0.0 or label_noise > 0.0) and rng is None:
        raise ValueError("exploration or label noise requires an rng")
    burst_left = 0
    burst_steer = 0.0

    prev_idx = track.origin_index
    progress = 0.0
    abs_xte_sum = 0.0
    steps = 0
    trace: list[TraceRow] = []
    samples: list[LabeledSample] = []
    while steps < max_steps:
        idx, psi_cw, dist, side = locate(state.x, state.y)
        if dist > track.half_width:
            return False, abs_xte_sum / max(steps, 1), steps, trace, samples
        move = (idx - prev_idx + half) % n - half
        progress += move
        prev_idx = idx
        if progress >= goal:
            return True, abs_xte_sum / max(steps, 1), steps, trace, samples
        theta = wrap180(state.psi_deg - psi_cw)
        obs = Observation(
            dist * side,
            theta,
            state.v_kmh,
            tuple(curv_list[(idx + d) % n] for d in deltas),
        )
        steer = policy.predict(obs)
        if label_noise > 0.0:
            lap = max(0, int(progress // n))
            sigma = label_noise * label_noise_decay ** max(0, lap - label_noise_hold + 1)
            jitter = steer + rng.normal(0.0, sigma)
            steer = -1.0 if jitter < -1.0 else (1.0 if jitter > 1.0 else jitter)
        if collect:
            trace.append(TraceRow(state, steer, dist, theta))
            if steps % sample_stride == 0:
                samples.append(LabeledSample(obs, steer, "nominal"))
        abs_xte_sum += dist
        applied = steer
        if explore_amplitude > 0.0:
            if burst_left == 0 and rng.random() < _BURST_RATE:
                burst_left = int(rng.integers(*_BURST_LEN))
                burst_steer = float(rng.uniform(-explore_amplitude, explore_amplitude))
            # hold the override only inside a safe tube around the centerline
            if burst_left > 0 and dist <= _BURST_TUBE:
                applied = burst_steer
                burst_left -= 1
            else:
                burst_left = 0
        state = step_vehicle(state, applied, cfg)
        steps += 1
    return False, abs_xte_sum / max(steps, 1), steps, trace, samples


def tune_autopilot(
    track: Track,
    cfg: SimConfig,
    sweeps: int = 3,
    xte_gate: float = 0.2,
) -> PIDAutopilot:
    """Coordinate-descent gain tuning that minimizes mean |xte| over one lap.

    Raises AutopilotFailed when the best gains still leave the lane or keep
    the mean absolute cross-track distance at or above the gate.
    """
    gains = {"kp": 0.5, "ki": 0.05, "kd": 0.25, "kh": 2.0}

    def cost(g: dict) -> float:
        pilot = PIDAutopilot(g["kp"], g["ki"], g["kd"], g["kh"], cfg.dt)
        ok, mean_xte, steps, _, _ = _drive_laps(pilot, track, cfg, 1.0)
        if not ok:
            return 1000.0 - steps  # failing runs rank below any finisher
        return mean_xte

    best = cost(gains)
    for _ in range(sweeps):
        for key in ("kh", "kp", "kd", "ki"):
            for factor in (0.5, 0.8, 1.25, 2.0):
                trial = dict(gains)
                trial[key] = gains[key] * factor
                c = cost(trial)
                if c < best:
                    best = c
                    gains = trial
    if best >= xte_gate:
        raise AutopilotFailed(f"tuned autopilot mean |xte| = {best:.3f} m")
    return PIDAutopilot(gains["kp"], gains["ki"], gains["kd"], gains["kh"], cfg.dt)


def collect_reference_trace(
    autopilot: PIDAutopilot,
    track: Track,
    cfg: SimConfig,
    laps: int = 3,
    explore_amplitude: float = 0.0,
    label_noise: float = 0.0,
    label_noise_decay: float = 1.0,
    label_noise_hold: int = 1,
    sample_stride: int = 1,
    seed: int = 0,
) -> tuple[list[TraceRow], Dataset]:
    """Drive the autopilot for whole laps and label every visited state.

    explore_amplitude widens the visited envelope, label_noise jitters
    the demonstrated command (shrinking by label_noise_decay each lap
    after the first label_noise_hold laps), and sample_stride labels
    every stride-th frame only (see _drive_laps); all default to off."""
    stochastic = explore_amplitude > 0.0 or label_noise > 0.0
    rng = np.random.default_rng(seed) if stochastic else None
    ok, mean_xte, steps, trace, samples = _drive_laps(
        autopilot, track, cfg, float(laps), collect=True,
        explore_amplitude=explore_amplitude, label_noise=label_noise,
        label_noise_decay=label_noise_decay, label_noise_hold=label_noise_hold,
        sample_stride=sample_stride, rng=rng,
    )
    if not ok:
        raise AutopilotFailed(f"autopilot left the lane after {steps} steps")
    return trace, Dataset(samples)


# ---------------------------------------------------------------------------
# model serialization


def save_model(model, path: str) -> None:
    if isinstance(model, PIDAutopilot):
        doc = {
            "kind": "autopilot",
            "feature_spec": {"gains": model.gains(), "dt": model.dt},
            "weights": [],
            "lambda": None,
            "seed": None,
            "validation_loss": None,
            "name": model.name,
        }
    else:
        doc = {
            "kind": model.kind,
            "feature_spec": {
                "inputs": DATASET_HEADER[:_N_RAW],
                "degree": 2,
                "mu": [float(v) for v in model.mu],
                "scale": [float(v) for v in model.scale],
            },
            "weights": [float(w) for w in model.weights],
            "lambda": model.ridge_lambda,
            "seed": int(model.seed),
            "validation_loss": float(model.validation_loss),
            "name": model.name,
            "split": None if model.train_idx is None else {
                "train": [int(i) for i in model.train_idx],
                "val": [int(i) for i in model.val_idx],
            },
        }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, separators=(",", ":"), sort_keys=True)
        fh.write("\n")


def load_model(path: str):
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc["kind"] == "autopilot":
        g = doc["feature_spec"]["gains"]
        return PIDAutopilot(
            g["kp"], g["ki"], g["kd"], g["kh"], doc["feature_spec"]["dt"],
            name=doc.get("name", "autopilot"),
        )
    spec = doc["feature_spec"]
    split = doc.get("split")
    return LearnedModel(
        weights=np.array(doc["weights"], dtype=float),
        mu=np.array(spec["mu"], dtype=float),
        scale=np.array(spec["scale"], dtype=float),
        ridge_lambda=float(doc["lambda"]),
        seed=int(doc["seed"]),
        validation_loss=float(doc["validation_loss"]),
        name=doc.get("name", "model"),
        kind=doc["kind"],
        train_idx=None if split is None else np.array(split["train"], dtype=int),
        val_idx=None if split is None else np.array(split["val"], dtype=int),
    )

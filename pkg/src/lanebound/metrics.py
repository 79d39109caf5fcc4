"""Archive metrics and the nonparametric statistics used to compare runs.

The radius metric places a failing state in the unit cube spanned by the
validity bounds and measures its distance from the origin, normalized so the
hardest possible state sits at 1. Recoverability cross-runs one model on the
pairs found for another. The statistics are self-contained: Vargha-Delaney
effect size, a Mann-Whitney U test that is exact (tie-aware) for small
samples, and a Mann-Kendall trend test.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .boundary import ValidityLimits
from .dynamics import SimConfig, run_episode, nominal_start
from .geometry import Track, wrap180
from .search import ArchiveEntry


class EmptyArchive(ValueError):
    """Raised when a metric needs at least one archived pair."""


class EmptySample(ValueError):
    """Raised when a statistic receives an empty sample."""


class TooShort(ValueError):
    """Raised when a sequence is too short for a trend test."""


# critical |z| for a two-sided test at alpha = 0.05
Z_CRIT_5PCT = 1.959963984540054


# ---------------------------------------------------------------------------
# archive metrics


def _likely(entries: Sequence[ArchiveEntry]) -> list[ArchiveEntry]:
    return [e for e in entries if e.replication_pct > 0.0]


@dataclass
class RadiusReport:
    mean: float
    per_pair: list[float]

    @property
    def count(self) -> int:
        return len(self.per_pair)


def radius(
    entries: Sequence[ArchiveEntry],
    track: Track,
    limits: ValidityLimits,
) -> RadiusReport:
    """Normalized severity of the non-recoverable state of each pair.

    The state's (xte, v, |theta|) is scaled by (half lane width, speed limit,
    heading limit) into the unit cube and its Euclidean norm is divided by
    sqrt(3), so the result lies in [0, 1] for valid states. Only entries with
    a nonzero replication percentage participate.
    """
    kept = _likely(entries)
    if not kept:
        raise EmptyArchive("no entries with replication_pct > 0")
    per_pair = []
    for e in kept:
        s = e.pair.s2 if e.recoverable == "s1" else e.pair.s1
        _, psi_cw, dist, _ = track.locate(s.x, s.y)
        q = (
            dist / track.half_width,
            s.v_kmh / limits.v_max_kmh,
            abs(wrap180(s.psi_deg - psi_cw)) / limits.theta_max_deg,
        )
        per_pair.append(math.sqrt(q[0] ** 2 + q[1] ** 2 + q[2] ** 2) / math.sqrt(3.0))
    return RadiusReport(float(np.mean(per_pair)), per_pair)


@dataclass
class RecoverabilityReport:
    recoverable_mean: float  # % of runs recovered from recoverable states
    non_recoverable_mean: float
    per_state_recoverable: list[float] = field(default_factory=list)
    per_state_non_recoverable: list[float] = field(default_factory=list)
    runs: int = 1

    def overall_mean(self) -> float:
        values = self.per_state_recoverable + self.per_state_non_recoverable
        return float(np.mean(values)) if values else math.nan


def recoverability(
    model,
    entries: Sequence[ArchiveEntry],
    track: Track,
    cfg: SimConfig,
    runs: int = 3,
    seed: int = 0,
    noise_sigma: float = 0.0,
) -> RecoverabilityReport:
    """Share of episodes a model survives from another archive's states.

    Every archived state (both the recoverable and the non-recoverable one)
    is driven `runs` times with the minimum-step success threshold; the
    per-state percentage is averaged within each class. Only likely entries
    (nonzero replication) participate.
    """
    kept = _likely(entries)
    if not kept:
        raise EmptyArchive("no entries with replication_pct > 0")
    rng = np.random.default_rng(seed)
    per_rec: list[float] = []
    per_non: list[float] = []
    for e in kept:
        rec = e.pair.s1 if e.recoverable == "s1" else e.pair.s2
        non = e.pair.s2 if e.recoverable == "s1" else e.pair.s1
        for state, sink in ((rec, per_rec), (non, per_non)):
            ok = 0
            for _ in range(runs):
                ns = int(rng.integers(0, 2**63)) if noise_sigma > 0.0 else None
                result = run_episode(
                    model, track, state, cfg.t_min_steps, cfg,
                    noise_sigma=noise_sigma, noise_seed=ns, keep_trace=False,
                )
                ok += int(result.success)
            sink.append(100.0 * ok / runs)
    return RecoverabilityReport(
        float(np.mean(per_rec)),
        float(np.mean(per_non)),
        per_rec,
        per_non,
        runs,
    )


def success_rate(
    model,
    track: Track,
    n: int,
    cfg: SimConfig,
    seed: int = 0,
    noise_sigma: float = 0.0,
) -> float:
    """Percentage of n nominal-start episodes that survive the evaluation
    budget. With noise disabled all episodes coincide, so the rate is 0 or
    100 exactly."""
    rng = np.random.default_rng(seed)
    start = nominal_start(track)
    ok = 0
    for _ in range(n):
        ns = int(rng.integers(0, 2**63)) if noise_sigma > 0.0 else None
        result = run_episode(
            model, track, start, cfg.eval_steps, cfg,
            noise_sigma=noise_sigma, noise_seed=ns, keep_trace=False,
        )
        ok += int(result.success)
    return 100.0 * ok / n


# ---------------------------------------------------------------------------
# statistics


def vargha_delaney_a12(a: Sequence[float], b: Sequence[float]) -> float:
    """Probability-of-superiority effect size: share of (a, b) pairings in
    which a wins, counting ties as half wins."""
    if len(a) == 0 or len(b) == 0:
        raise EmptySample("both samples must be non-empty")
    more = same = 0
    for x in a:
        for y in b:
            if x > y:
                more += 1
            elif x == y:
                same += 1
    return (more + 0.5 * same) / (len(a) * len(b))


@dataclass(frozen=True)
class MannWhitneyResult:
    u: float  # U statistic of the first sample
    p: float  # two-sided
    method: str  # "exact" or "normal"
    degenerate: bool = False


def _midranks(pooled: np.ndarray) -> np.ndarray:
    order = np.argsort(pooled, kind="stable")
    ranks = np.empty(len(pooled))
    i = 0
    while i < len(pooled):
        j = i
        while j + 1 < len(pooled) and pooled[order[j + 1]] == pooled[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _exact_two_sided_p(a: np.ndarray, b: np.ndarray, u_obs: float) -> float:
    """Exact permutation p-value via a counting walk over distinct pooled
    values; ties are handled exactly by tracking twice the U statistic."""
    n, m = len(a), len(b)
    pooled = np.concatenate([a, b])
    values, counts = np.unique(pooled, return_counts=True)
    # dp maps (taken, 2U) -> number of ways, processed value by value
    dp: dict[tuple[int, int], int] = {(0, 0): 1}
    seen_below = 0  # total count of already-processed (smaller) values
    for c in counts:
        c = int(c)
        nxt: dict[tuple[int, int], int] = {}
        for (t, w), ways in dp.items():
            for j in range(0, min(c, n - t) + 1):
                # a-elements of this value beat the smaller b-elements and
                # half-beat the equal b-elements
                w2 = w + 2 * j * (seen_below - t) + j * (c - j)
                key = (t + j, w2)
                nxt[key] = nxt.get(key, 0) + ways * math.comb(c, j)
        dp = nxt
        seen_below += c
    total = math.comb(n + m, n)
    d_obs = abs(2.0 * u_obs - n * m)
    hits = sum(
        ways for (t, w), ways in dp.items() if t == n and abs(w - n * m) >= d_obs - 1e-9
    )
    return hits / total


def mann_whitney_u(a: Sequence[float], b: Sequence[float]) -> MannWhitneyResult:
    """Two-sided Mann-Whitney U test.

    Exact (tie-aware permutation distribution) when len(a) * len(b) <= 400,
    normal approximation with tie and continuity corrections otherwise. The
    returned U belongs to the first sample. When every pooled value is
    identical the test is degenerate and reports p = 1.
    """
    if len(a) == 0 or len(b) == 0:
        raise EmptySample("both samples must be non-empty")
    xa = np.asarray(a, dtype=float)
    xb = np.asarray(b, dtype=float)
    n, m = len(xa), len(xb)
    pooled = np.concatenate([xa, xb])
    ranks = _midranks(pooled)
    u = float(ranks[:n].sum() - n * (n + 1) / 2.0)
    if np.all(pooled == pooled[0]):
        return MannWhitneyResult(u, 1.0, "degenerate", True)
    if n * m <= 400:
        return MannWhitneyResult(u, _exact_two_sided_p(xa, xb, u), "exact")
    _, tie_counts = np.unique(pooled, return_counts=True)
    tie_term = float(np.sum(tie_counts**3 - tie_counts))
    nm = n + m
    var = n * m * (nm + 1) / 12.0 - n * m * tie_term / (12.0 * nm * (nm - 1))
    if var <= 0.0:
        return MannWhitneyResult(u, 1.0, "degenerate", True)
    mean = n * m / 2.0
    d = u - mean
    cc = 0.5 if d > 0 else (-0.5 if d < 0 else 0.0)  # continuity correction
    z = (d - cc) / math.sqrt(var)
    p = math.erfc(abs(z) / math.sqrt(2.0))
    return MannWhitneyResult(u, min(1.0, p), "normal")


@dataclass(frozen=True)
class MannKendallResult:
    s: int
    var_s: float
    z: float
    p: float
    trend: str  # "increasing", "decreasing", or "none"


def mann_kendall_s(seq: Sequence[float]) -> MannKendallResult:
    """Mann-Kendall trend test with tie-adjusted variance, alpha = 0.05."""
    x = np.asarray(seq, dtype=float)
    n = len(x)
    if n < 3:
        raise TooShort("trend test needs at least 3 observations")
    s = 0
    for i in range(n - 1):
        s += int(np.sign(x[i + 1 :] - x[i]).sum())
    _, tie_counts = np.unique(x, return_counts=True)
    tie_term = float(np.sum(tie_counts * (tie_counts - 1) * (2 * tie_counts + 5)))
    var_s = (n * (n - 1) * (2 * n + 5) - tie_term) / 18.0
    if var_s <= 0.0:
        return MannKendallResult(s, 0.0, 0.0, 1.0, "none")
    if s > 0:
        z = (s - 1) / math.sqrt(var_s)
    elif s < 0:
        z = (s + 1) / math.sqrt(var_s)
    else:
        z = 0.0
    p = math.erfc(abs(z) / math.sqrt(2.0))
    if abs(z) > Z_CRIT_5PCT:
        trend = "increasing" if s > 0 else "decreasing"
    else:
        trend = "none"
    return MannKendallResult(int(s), var_s, z, min(1.0, p), trend)

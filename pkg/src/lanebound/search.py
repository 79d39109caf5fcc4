"""Boundary pair search: seeded restarts, chain mutation, bisection.

The genbo search evolves pairs of close valid states until a model succeeds
from one and fails from the other. Each restart seeds a pair from the
reference trace, then repeatedly extends a chain of increasingly challenging
pairs and bisects it for an outcome flip. A 1+1 evolutionary baseline shares
the seeding and mutation operators but simply climbs observed cross-track
distance. Found pairs pass a replication protocol before entering the
archive, and with noise disabled every search is a deterministic function of
(model, track, seed).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .boundary import (
    ClosenessBudget,
    StatePair,
    ValidityLimits,
    mutate_pair,
    mutate_state,
    sample_valid_state,
    state_distance,
)
from .dynamics import SimConfig, VehicleState, run_episode
from .geometry import Track


@dataclass(frozen=True)
class SearchConfig:
    restarts: int = 40  # R
    iterations: int = 10  # N, pair-execution budget per restart
    chain_length: int = 3  # L, mutations per chain extension
    mutation_budget: int = 20
    replication_runs: int = 3
    replication_majority: int = 2
    final_repetitions: int = 10
    dedup_tolerance: float = 0.25  # fraction of the closeness budget
    noise_sigma: float = 0.0


@dataclass
class ArchiveEntry:
    pair: StatePair
    recoverable: str  # "s1" or "s2": the state the model drove successfully
    discovered_by: str  # "genbo", "baseline", or "collateral"
    restart: int
    replication_pct: float


@dataclass
class SearchReport:
    algorithm: str
    model_name: str
    seed: int
    archive: list[ArchiveEntry] = field(default_factory=list)
    episode_count: int = 0  # real simulated episodes
    pair_executions: int = 0  # real pair executions (2 episodes each)
    restarts_completed: int = 0
    restart_logs: list[dict] = field(default_factory=list)


PairOutcome = tuple[bool, bool]


class _Executor:
    """Runs both states of a pair, memoizing outcomes within one restart so
    bisection never re-simulates a pair it has already seen."""

    def __init__(
        self,
        model,
        track: Track,
        cfg: SimConfig,
        noise_sigma: float,
        rng: np.random.Generator,
        report: SearchReport,
    ):
        self.model = model
        self.track = track
        self.cfg = cfg
        self.noise_sigma = noise_sigma
        self.rng = rng
        self.report = report
        self.memo: dict = {}

    def _episode(self, state: VehicleState):
        seed = int(self.rng.integers(0, 2**63)) if self.noise_sigma > 0.0 else None
        result = run_episode(
            self.model,
            self.track,
            state,
            self.cfg.t_min_steps,
            self.cfg,
            noise_sigma=self.noise_sigma,
            noise_seed=seed,
            keep_trace=False,
        )
        self.report.episode_count += 1
        return result

    def run(self, pair: StatePair, memoize: bool = True):
        """Returns (ok1, ok2, max_xte over both episodes)."""
        key = (pair.s1, pair.s2)
        if memoize and key in self.memo:
            return self.memo[key]
        r1 = self._episode(pair.s1)
        r2 = self._episode(pair.s2)
        self.report.pair_executions += 1
        out = (r1.success, r2.success, max(r1.max_xte, r2.max_xte))
        if memoize:
            self.memo[key] = out
        return out


def binary_search_boundary(
    pairs: Sequence[StatePair],
    execute: Callable[[StatePair], PairOutcome],
) -> tuple[int, int]:
    """Find a pair with an outcome flip in a chain of increasingly hard pairs.

    The first pair is known to succeed in both states and is never assumed
    otherwise. The last pair runs first: if it also succeeds in both states
    there is nothing to find; if exactly one state fails it is itself the
    answer; if both fail, bisection walks inward, moving toward the head when
    the midpoint fails in both states and toward the tail when it succeeds in
    both. Returns (index >= 1 of a flipped pair or -1, number of pair
    evaluations requested), counting memoized evaluations all the same.
    """
    evals = 0

    def run(i: int) -> PairOutcome:
        nonlocal evals
        evals += 1
        ok1, ok2 = execute(pairs[i])[:2]
        return ok1, ok2

    last = len(pairs) - 1
    ok1, ok2 = run(last)
    if ok1 != ok2:
        return (last, evals) if last >= 1 else (-1, evals)
    if ok1 and ok2:
        return -1, evals
    lo, hi = 0, last  # pairs[lo] succeeds twice, pairs[hi] fails twice
    while hi - lo > 1:
        mid = (lo + hi) // 2
        ok1, ok2 = run(mid)
        if ok1 != ok2:
            return mid, evals
        if not ok1 and not ok2:
            hi = mid
        else:
            lo = mid
    return -1, evals


def replicate_pair(
    pair: StatePair,
    executor: _Executor,
    cfg: SearchConfig,
) -> tuple[bool, float]:
    """Two-stage replication of a candidate boundary pair.

    Acceptance: both states re-run replication_runs times with fresh noise
    seeds; the candidate is accepted when the outcomes flip in at least
    replication_majority of the paired runs and the per-state majorities
    disagree. Final stage: over final_repetitions paired runs, the
    replication percentage is the share of runs in which the flip held.
    Rejected candidates report 0%.
    """
    runs = [executor.run(pair, memoize=False) for _ in range(cfg.replication_runs)]
    xor = sum(1 for o in runs if o[0] != o[1])
    s1_maj = sum(1 for o in runs if o[0]) * 2 > cfg.replication_runs
    s2_maj = sum(1 for o in runs if o[1]) * 2 > cfg.replication_runs
    if xor < cfg.replication_majority or s1_maj == s2_maj:
        return False, 0.0
    final = [executor.run(pair, memoize=False) for _ in range(cfg.final_repetitions)]
    pct = 100.0 * sum(1 for o in final if o[0] != o[1]) / cfg.final_repetitions
    return True, pct


def is_duplicate(
    archive: Sequence[ArchiveEntry],
    pair: StatePair,
    eps: ClosenessBudget,
    tolerance: float,
) -> bool:
    """A pair duplicates an entry when both states sit within the scaled
    closeness budget of the entry's corresponding states."""
    tp, tv, tpsi = tolerance * eps.eps_p, tolerance * eps.eps_v, tolerance * eps.eps_psi

    def near(a: VehicleState, b: VehicleState) -> bool:
        dp, dv, dpsi = state_distance(a, b)
        return dp <= tp and dv <= tv and dpsi <= tpsi

    return any(
        near(pair.s1, e.pair.s1) and near(pair.s2, e.pair.s2) for e in archive
    )


def archive_insert(
    archive: list[ArchiveEntry],
    entry: ArchiveEntry,
    eps: ClosenessBudget,
    tolerance: float = 0.25,
) -> bool:
    """Insert unless a near-identical pair is already archived."""
    if is_duplicate(archive, entry.pair, eps, tolerance):
        return False
    archive.append(entry)
    return True


def _seed_pair(
    trace: Sequence[VehicleState],
    track: Track,
    rng: np.random.Generator,
    limits: ValidityLimits,
    eps: ClosenessBudget,
    budget: int,
) -> StatePair | None:
    """Sample a valid trace state and mutate it into a harder close neighbour."""
    for _ in range(3):
        s1 = sample_valid_state(trace, rng, track, limits)
        for _ in range(50):
            s2 = mutate_state(s1, s1, track, rng, limits, eps, budget)
            if s2 is not None:
                return StatePair(s1, s2)
    return None


def _consider(
    pair: StatePair,
    outcome,
    discovered_by: str,
    restart: int,
    executor: _Executor,
    scfg: SearchConfig,
    eps: ClosenessBudget,
    report: SearchReport,
) -> bool:
    """Dedup, replicate, and archive one candidate. True when archived."""
    if is_duplicate(report.archive, pair, eps, scfg.dedup_tolerance):
        return False
    accepted, pct = replicate_pair(pair, executor, scfg)
    if not accepted:
        return False
    recoverable = "s1" if outcome[0] else "s2"
    entry = ArchiveEntry(pair, recoverable, discovered_by, restart, pct)
    return archive_insert(report.archive, entry, eps, scfg.dedup_tolerance)


def genbo_search(
    model,
    track: Track,
    trace: Sequence[VehicleState],
    cfg: SimConfig,
    scfg: SearchConfig,
    limits: ValidityLimits,
    eps: ClosenessBudget,
    seed: int,
) -> SearchReport:
    """Restart-based boundary pair search with chain mutation and bisection.

    Each restart seeds a pair, executes it (one budget unit), stores an
    immediate flip as a collateral find, and restarts on any failure.
    Otherwise the pair chain grows by up to chain_length mutations at a time
    and is bisected; bisection evaluations are charged against the iteration
    budget, and a newly found pair closes the restart.
    """
    report = SearchReport("genbo", getattr(model, "name", "model"), seed)
    restart_seeds = np.random.SeedSequence(seed).spawn(scfg.restarts)
    for r in range(scfg.restarts):
        rng = np.random.default_rng(restart_seeds[r])
        executor = _Executor(model, track, cfg, scfg.noise_sigma, rng, report)
        log = {"restart": r, "iterations": 0, "archived": False, "collateral": False}
        pair0 = _seed_pair(trace, track, rng, limits, eps, scfg.mutation_budget)
        if pair0 is None:
            report.restart_logs.append(log)
            report.restarts_completed += 1
            continue
        outcome = executor.run(pair0)
        iterations = 1
        if outcome[0] != outcome[1]:
            log["collateral"] = _consider(
                pair0, outcome, "collateral", r, executor, scfg, eps, report
            )
        if outcome[0] and outcome[1]:
            pairs = [pair0]
            while iterations <= scfg.iterations:
                for _ in range(scfg.chain_length):
                    nxt = mutate_pair(
                        pairs[-1], track, rng, limits, eps, scfg.mutation_budget
                    )
                    if nxt is None:
                        break
                    pairs.append(nxt)
                idx, evals = binary_search_boundary(pairs, executor.run)
                iterations += evals
                if idx > 0:
                    found = executor.run(pairs[idx])
                    if _consider(
                        pairs[idx], found, "genbo", r, executor, scfg, eps, report
                    ):
                        log["archived"] = True
                        break
        log["iterations"] = iterations
        report.restart_logs.append(log)
        report.restarts_completed += 1
    return report


def baseline_search(
    model,
    track: Track,
    trace: Sequence[VehicleState],
    cfg: SimConfig,
    scfg: SearchConfig,
    limits: ValidityLimits,
    eps: ClosenessBudget,
    seed: int,
) -> SearchReport:
    """1+1 evolutionary baseline sharing seeding and mutation with genbo.

    Each iteration mutates the current pair and keeps whichever of the two
    has the higher cross-track distance observed in execution (ties keep the
    incumbent). Pairs whose outcomes flip are archived as they appear; the
    budget is iterations pair executions per restart."""
    report = SearchReport("baseline", getattr(model, "name", "model"), seed)
    restart_seeds = np.random.SeedSequence(seed).spawn(scfg.restarts)
    for r in range(scfg.restarts):
        rng = np.random.default_rng(restart_seeds[r])
        executor = _Executor(model, track, cfg, scfg.noise_sigma, rng, report)
        log = {"restart": r, "iterations": 0, "archived": False, "collateral": False}
        pair = _seed_pair(trace, track, rng, limits, eps, scfg.mutation_budget)
        if pair is None:
            report.restart_logs.append(log)
            report.restarts_completed += 1
            continue
        outcome = executor.run(pair)
        execs = 1
        if outcome[0] != outcome[1]:
            log["collateral"] = _consider(
                pair, outcome, "collateral", r, executor, scfg, eps, report
            )
        best_xte = outcome[2]
        while execs < scfg.iterations:
            candidate = None
            for _ in range(5):
                candidate = mutate_pair(
                    pair, track, rng, limits, eps, scfg.mutation_budget
                )
                if candidate is not None:
                    break
            if candidate is None:
                break
            cand_outcome = executor.run(candidate)
            execs += 1
            if cand_outcome[0] != cand_outcome[1]:
                if _consider(
                    candidate, cand_outcome, "baseline", r, executor, scfg, eps, report
                ):
                    log["archived"] = True
            if cand_outcome[2] > best_xte:
                pair = candidate
                best_xte = cand_outcome[2]
        log["iterations"] = execs
        report.restart_logs.append(log)
        report.restarts_completed += 1
    return report


# ---------------------------------------------------------------------------
# serialization


def _state_dict(s: VehicleState) -> dict:
    return {"x": s.x, "y": s.y, "psi": s.psi_deg, "v": s.v_kmh}


def archive_to_list(archive: Sequence[ArchiveEntry]) -> list[dict]:
    return [
        {
            "pair": {"s1": _state_dict(e.pair.s1), "s2": _state_dict(e.pair.s2)},
            "recoverable": e.recoverable,
            "discovered_by": e.discovered_by,
            "restart": e.restart,
            "replication_pct": e.replication_pct,
        }
        for e in archive
    ]


def archive_from_list(items: Sequence[dict]) -> list[ArchiveEntry]:
    out = []
    for d in items:
        s1 = d["pair"]["s1"]
        s2 = d["pair"]["s2"]
        out.append(
            ArchiveEntry(
                StatePair(
                    VehicleState(s1["x"], s1["y"], s1["psi"], s1["v"]),
                    VehicleState(s2["x"], s2["y"], s2["psi"], s2["v"]),
                ),
                d["recoverable"],
                d["discovered_by"],
                int(d["restart"]),
                float(d["replication_pct"]),
            )
        )
    return out


def save_archive(archive: Sequence[ArchiveEntry], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(archive_to_list(archive), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_archive(path: str) -> list[ArchiveEntry]:
    with open(path, "r", encoding="utf-8") as fh:
        return archive_from_list(json.load(fh))

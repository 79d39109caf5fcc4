"""End-to-end experiment orchestration.

run_experiment drives the whole study on one track: tune the autopilot,
collect labeled reference laps, train the model quality ladder, run both
search algorithms repeatedly per model, compute archive metrics, generate
harder evaluation tracks, retrain the best tiers on autopilot-labeled data
from their own boundary states, and measure success rates before and after.

Every stage derives its randomness from the master seed, so with observation
noise disabled a rerun with the same configuration writes byte-identical
archives and reports. Artifacts reference each other by paths relative to
the output directory, and dictionary-shaped JSON artifacts embed the master
seed and a hash of the configuration (minus execution-environment fields,
which must not change the science).
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .boundary import ClosenessBudget, ValidityLimits
from .controllers import (
    Dataset,
    Hyperparams,
    LabeledSample,
    LearnedModel,
    PIDAutopilot,
    _combine_seed,
    collect_reference_trace,
    dataset_to_csv,
    fit_on_split,
    save_model,
    split_indices,
    train_ladder,
    tune_autopilot,
)
from .dynamics import (
    SimConfig,
    drive_nominal,
    extract_features,
    run_episode,
    write_trace_csv,
)
from .geometry import (
    Track,
    compute_track_features,
    generate_evaluation_track,
    load_track,
    make_training_track,
    mirror_track,
    save_track,
)
from .metrics import (
    mann_kendall_s,
    mann_whitney_u,
    radius,
    recoverability,
    success_rate,
    vargha_delaney_a12,
)
from .render import render_track_svg, save_svg
from .search import (
    ArchiveEntry,
    SearchConfig,
    SearchReport,
    baseline_search,
    genbo_search,
    save_archive,
)


class EmptyDataset(ValueError):
    """Raised when no boundary state yields any training samples."""


class StageFailed(RuntimeError):
    """Raised when an experiment stage aborts; the manifest records it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class RunConfig:
    """Everything one experiment run depends on.

    output_dir and parallelism describe where and how to execute, not what
    to compute; they are excluded from the config hash so identical science
    run in different places still matches.
    """

    master_seed: int = 20260818
    output_dir: str = "runs/quickstart"
    profile: str = "quickstart"
    repetitions: int = 9  # search repetitions per (model, algorithm)
    parallelism: int = 1

    sim: SimConfig = SimConfig()
    limits: ValidityLimits = ValidityLimits()
    closeness: ClosenessBudget = ClosenessBudget()
    search: SearchConfig = SearchConfig(restarts=10, noise_sigma=0.01)
    hp: Hyperparams = Hyperparams()

    # track construction (used when track_file is not given)
    track_file: str | None = None
    lane_width: float = 4.0
    track_size: tuple[float, float] = (220.0, 120.0)
    corner_radii: tuple[float, float, float, float] = (9.0, 12.0, 15.0, 11.0)
    spacing: float = 2.0

    # reference data and ladder
    laps: int = 3
    data_laps: int = 10  # laps driven for the training dataset
    data_explore: float = 0.5  # steering burst amplitude widening the labeled envelope
    data_label_noise: float = 0.5  # demonstration jitter during the warm-up laps
    data_noise_hold: int = 4  # warm-up laps at full jitter
    data_noise_decay: float = 0.3  # per-lap decay of the jitter once warmed up
    data_stride: int = 2  # label every stride-th frame of the data drive
    ladder_fractions: tuple[float, ...] = (0.1, 0.3, 0.6, 1.0)

    # evaluation
    eval_track_count: int = 6
    eval_distance_frac: float = 0.35  # of the waypoint count, in meters
    eval_max_curvature: float = 0.145
    eval_noise_sigma: float = 0.04  # perturbation level for success-rate episodes
    recoverability_runs: int = 3
    recoverability_max_states: int = 60
    success_runs: int = 20
    boundary_steps: int = 100
    retrain_count: int = 2  # how many of the best tiers to retrain


def quickstart_config(**overrides) -> RunConfig:
    return replace(RunConfig(), **overrides)


def paper_config(**overrides) -> RunConfig:
    base = RunConfig(
        profile="paper",
        output_dir="runs/paper",
        search=SearchConfig(restarts=40, noise_sigma=0.01),
        success_runs=100,
    )
    return replace(base, **overrides)


def micro_config(**overrides) -> RunConfig:
    """Tiny deterministic profile: no observation noise, few restarts.

    Small enough that a full experiment finishes in well under a minute,
    which makes byte-identity checks between two runs practical.
    """
    base = RunConfig(
        profile="micro",
        output_dir="runs/micro",
        repetitions=2,
        search=SearchConfig(restarts=3, iterations=8, noise_sigma=0.0),
        eval_track_count=2,
        eval_noise_sigma=0.0,
        success_runs=3,
        recoverability_runs=1,
        recoverability_max_states=20,
    )
    return replace(base, **overrides)


_PROFILES = {
    "quickstart": quickstart_config,
    "paper": paper_config,
    "micro": micro_config,
}

_NESTED = {
    "sim": SimConfig,
    "limits": ValidityLimits,
    "closeness": ClosenessBudget,
    "search": SearchConfig,
    "hp": Hyperparams,
}
_TUPLE_FIELDS = ("track_size", "corner_radii", "ladder_fractions")


def config_to_dict(cfg: RunConfig) -> dict:
    d = asdict(cfg)
    for key in _TUPLE_FIELDS:
        d[key] = list(d[key])
    return d


def config_from_dict(d: dict) -> RunConfig:
    base = _PROFILES.get(d.get("profile", "quickstart"), quickstart_config)()
    kwargs: dict = {}
    for key, value in d.items():
        if key in _NESTED:
            kwargs[key] = _NESTED[key](**value)
        elif key in _TUPLE_FIELDS:
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return replace(base, **kwargs)


def apply_env_overrides(cfg: RunConfig) -> RunConfig:
    """LANEBOUND_OUTPUT_DIR and LANEBOUND_PARALLELISM override the config."""
    out = os.environ.get("LANEBOUND_OUTPUT_DIR")
    par = os.environ.get("LANEBOUND_PARALLELISM")
    if out:
        cfg = replace(cfg, output_dir=out)
    if par:
        cfg = replace(cfg, parallelism=max(1, int(par)))
    return cfg


def load_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return apply_env_overrides(config_from_dict(json.load(fh)))


def save_config(cfg: RunConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def config_hash(cfg: RunConfig) -> str:
    """Short hash of the experiment-defining configuration fields."""
    d = config_to_dict(cfg)
    d.pop("output_dir", None)
    d.pop("parallelism", None)
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


# ---------------------------------------------------------------------------
# retraining building blocks


def build_boundary_dataset(
    entries,
    autopilot: PIDAutopilot,
    track: Track,
    cfg: SimConfig,
    steps: int = 100,
) -> Dataset:
    """Label recovery behavior from archived non-recoverable states.

    The autopilot is placed in the non-recoverable state of each entry with
    nonzero replication and driven deterministically for a fixed number of
    steps; states it cannot keep in lane are discarded, each surviving state
    contributes exactly `steps` samples tagged "boundary"."""
    samples: list[LabeledSample] = []
    for e in entries:
        if e.replication_pct <= 0.0:
            continue
        state = e.pair.s2 if e.recoverable == "s1" else e.pair.s1
        result = run_episode(autopilot, track, state, steps, cfg, keep_trace=True)
        if not result.success:
            continue
        rows = [r for r in result.trace if not math.isnan(r.steer)][:steps]
        if len(rows) < steps:
            continue
        for r in rows:
            samples.append(
                LabeledSample(extract_features(r.state, track), r.steer, "boundary")
            )
    if not samples:
        raise EmptyDataset("every non-recoverable state was discarded")
    return Dataset(samples)


def merge_and_split(
    original: Dataset,
    boundary: Dataset,
    seed: int,
    val_fraction: float = 0.2,
    split: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[Dataset, Dataset]:
    """Merge boundary data into the original split, keeping the original
    validation set intact.

    `split` is the (train, validation) index pair the original model was
    fitted on; when omitted it is recomputed from `seed`, the fit seed
    recorded in that model. The boundary data is split by a derived seed,
    and its validation share joins the original validation set (which
    therefore is a subset of the new one).
    """
    tr_idx, va_idx = split if split is not None else split_indices(
        len(original), seed, val_fraction
    )
    train = original.subset(tr_idx)
    val = original.subset(va_idx)
    if len(boundary) == 0:
        return train, val
    nb = len(boundary)
    n_val_b = int(round(val_fraction * nb))
    perm = np.random.default_rng(_combine_seed(seed, 1)).permutation(nb)
    val_b = np.sort(perm[:n_val_b])
    train_b = np.sort(perm[n_val_b:])
    return train.merged(boundary.subset(train_b)), val.merged(boundary.subset(val_b))


def retrain_model(
    original: LearnedModel,
    original_data: Dataset,
    boundary: Dataset,
    hp: Hyperparams,
    name: str | None = None,
) -> tuple[LearnedModel, dict]:
    """Refit with the original hyperparameters and seed on the merged split.

    With an empty boundary dataset this reproduces the original fit exactly.
    Returns the new model and a summary of before/after validation losses.
    """
    split = None
    if original.train_idx is not None:
        split = (original.train_idx, original.val_idx)
    train, val = merge_and_split(
        original_data, boundary, original.seed, hp.val_fraction, split=split
    )
    merged = train.merged(val)
    train_idx = np.arange(len(train))
    val_idx = np.arange(len(train), len(merged))
    model = fit_on_split(
        merged, train_idx, val_idx, hp, original.seed,
        name=name or original.name + "_retrained",
    )
    info = {
        "boundary_samples": len(boundary),
        "train_size": len(train),
        "val_size": len(val),
        "val_loss_before": original.validation_loss,
        "val_loss_after": model.validation_loss,
    }
    return model, info


# ---------------------------------------------------------------------------
# experiment


def _search_cell(args):
    algo, model, track, trace_states, sim, scfg, limits, eps, seed = args
    fn = genbo_search if algo == "genbo" else baseline_search
    return fn(model, track, trace_states, sim, scfg, limits, eps, seed)


def _likely(entries) -> list[ArchiveEntry]:
    return [e for e in entries if e.replication_pct > 0.0]


def _cell_name(model_name: str, algo: str, rep: int) -> str:
    return f"{model_name}_{algo}_rep{rep}"


class _Workspace:
    """Output directory layout plus seed/hash-embedding JSON writer."""

    def __init__(self, cfg: RunConfig):
        self.root = Path(cfg.output_dir)
        self.hash = config_hash(cfg)
        self.seed = cfg.master_seed
        for sub in ("tracks", "models", "archives", "reports", "traces",
                    "datasets", "renders"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)

    def write_json(self, rel: str, doc: dict) -> str:
        doc = {"master_seed": self.seed, "config_hash": self.hash, **doc}
        with open(self.root / rel, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return rel


def run_experiment(cfg: RunConfig) -> dict:
    """Run every stage and write all artifacts under cfg.output_dir.

    Returns the manifest. Any stage error writes a partial manifest with the
    failed stage recorded, then raises StageFailed.
    """
    ws = _Workspace(cfg)
    manifest: dict = {
        "profile": cfg.profile,
        "config": {
            k: v
            for k, v in config_to_dict(cfg).items()
            if k not in ("output_dir", "parallelism")
        },
        "deterministic": cfg.search.noise_sigma == 0.0 and cfg.eval_noise_sigma == 0.0,
        "status": "running",
        "stages": [],
        "artifacts": {},
    }
    stage = "init"

    def done(name: str, **info) -> None:
        manifest["stages"].append({"name": name, **info})

    try:
        # -- track -----------------------------------------------------
        stage = "track"
        if cfg.track_file:
            track = load_track(cfg.track_file)
        else:
            track = make_training_track(
                lane_width=cfg.lane_width,
                size=cfg.track_size,
                corner_radii=cfg.corner_radii,
                spacing=cfg.spacing,
            )
        save_track(track, ws.root / "tracks" / f"{track.name}.json")
        manifest["artifacts"]["track"] = f"tracks/{track.name}.json"
        feats = compute_track_features(track)
        done(stage, waypoints=track.n, length=round(track.length, 3),
             curvature=round(feats.curvature, 6), turns=feats.num_turns)

        # -- autopilot -------------------------------------------------
        stage = "autopilot"
        pilot = tune_autopilot(track, cfg.sim)
        save_model(pilot, ws.root / "models" / "autopilot.json")
        manifest["artifacts"]["autopilot"] = "models/autopilot.json"
        done(stage, gains=pilot.gains())

        # -- reference trace and training dataset ------------------------
        # the reference trace comes from a clean nominal drive (it seeds the
        # search); the training dataset from a second drive with exploration
        # bursts and demonstration jitter, so imitation quality scales with
        # the amount of data
        stage = "trace"
        trace_rows, _ = collect_reference_trace(pilot, track, cfg.sim, cfg.laps)
        trace_states = [r.state for r in trace_rows]
        write_trace_csv(trace_rows, ws.root / "traces" / "reference.csv")
        _, data = collect_reference_trace(
            pilot, track, cfg.sim, cfg.data_laps,
            explore_amplitude=cfg.data_explore,
            label_noise=cfg.data_label_noise,
            label_noise_decay=cfg.data_noise_decay,
            label_noise_hold=cfg.data_noise_hold,
            sample_stride=cfg.data_stride,
            seed=_combine_seed(cfg.master_seed, 7),
        )
        dataset_to_csv(data, ws.root / "datasets" / "training.csv")
        manifest["artifacts"]["trace"] = "traces/reference.csv"
        manifest["artifacts"]["dataset"] = "datasets/training.csv"
        done(stage, samples=len(data), laps=cfg.data_laps)

        # -- model ladder ------------------------------------------------
        stage = "ladder"
        ladder = train_ladder(
            data, cfg.hp, track, cfg.sim,
            _combine_seed(cfg.master_seed, 1),
            fractions=cfg.ladder_fractions,
        )
        for m in ladder:
            save_model(m, ws.root / "models" / f"{m.name}.json")
            manifest["artifacts"][m.name] = f"models/{m.name}.json"
        done(stage, tiers=[m.name for m in ladder],
             val_losses=[round(m.validation_loss, 8) for m in ladder])

        # -- searches ----------------------------------------------------
        stage = "search"
        subjects = list(ladder) + [pilot]
        jobs = []
        for mi, model in enumerate(subjects):
            for ai, algo in enumerate(("genbo", "baseline")):
                for rep in range(cfg.repetitions):
                    seed = _combine_seed(cfg.master_seed, 2, mi, ai, rep)
                    jobs.append(
                        (algo, model, track, trace_states, cfg.sim,
                         cfg.search, cfg.limits, cfg.closeness, seed)
                    )
        if cfg.parallelism > 1:
            with ProcessPoolExecutor(max_workers=cfg.parallelism) as pool:
                reports = list(pool.map(_search_cell, jobs))
        else:
            reports = [_search_cell(j) for j in jobs]

        cells: dict[tuple[str, str, int], SearchReport] = {}
        cell_rows = []
        k = 0  # reports arrive in the same order the job grid was built
        for mi, model in enumerate(subjects):
            for algo in ("genbo", "baseline"):
                for rep in range(cfg.repetitions):
                    rpt = reports[k]
                    k += 1
                    cells[(model.name, algo, rep)] = rpt
                    name = _cell_name(model.name, algo, rep)
                    save_archive(rpt.archive, ws.root / "archives" / f"{name}.json")
                    cell_rows.append(
                        {
                            "model": model.name,
                            "algo": algo,
                            "rep": rep,
                            "seed": rpt.seed,
                            "archived": len(rpt.archive),
                            "likely": len(_likely(rpt.archive)),
                            "episodes": rpt.episode_count,
                            "pair_executions": rpt.pair_executions,
                            "file": f"archives/{name}.json",
                        }
                    )
        counts = {
            m.name: {
                algo: [len(cells[(m.name, algo, r)].archive) for r in range(cfg.repetitions)]
                for algo in ("genbo", "baseline")
            }
            for m in subjects
        }
        manifest["artifacts"]["search_summary"] = ws.write_json(
            "reports/search_summary.json",
            {
                "cells": cell_rows,
                "counts": counts,
                "mean_counts": {
                    m: {a: float(np.mean(v)) for a, v in per.items()}
                    for m, per in counts.items()
                },
            },
        )
        done(stage, cells=len(cell_rows),
             episodes=int(sum(r.episode_count for r in reports)))

        # -- archive metrics ----------------------------------------------
        stage = "metrics"
        tier_names = [m.name for m in ladder]
        pooled_entries: dict[str, list[ArchiveEntry]] = {
            m.name: [
                e
                for r in range(cfg.repetitions)
                for e in _likely(cells[(m.name, "genbo", r)].archive)
            ]
            for m in subjects
        }

        genbo_sizes = {m: counts[m]["genbo"] for m in counts}
        base_sizes = {m: counts[m]["baseline"] for m in counts}
        pooled_g = [s for m in counts for s in genbo_sizes[m]]
        pooled_b = [s for m in counts for s in base_sizes[m]]
        mw_pooled = mann_whitney_u(pooled_g, pooled_b)
        per_model_stats = {
            m: {
                "a12": vargha_delaney_a12(genbo_sizes[m], base_sizes[m]),
                "mw_u": mann_whitney_u(genbo_sizes[m], base_sizes[m]).u,
                "mw_p": mann_whitney_u(genbo_sizes[m], base_sizes[m]).p,
            }
            for m in counts
        }

        radius_block: dict[str, dict] = {}
        for m in subjects:
            per_run = []
            for r in range(cfg.repetitions):
                entries = _likely(cells[(m.name, "genbo", r)].archive)
                if entries:
                    per_run.append(radius(entries, track, cfg.limits).mean)
            pooled = pooled_entries[m.name]
            radius_block[m.name] = {
                "per_run_means": per_run,
                "pooled_mean": (
                    radius(pooled, track, cfg.limits).mean if pooled else None
                ),
                "pooled_per_pair": (
                    radius(pooled, track, cfg.limits).per_pair if pooled else []
                ),
            }
        radius_vs_m1 = {}
        m1 = tier_names[0]
        for m in tier_names[1:]:
            a = radius_block[m1]["per_run_means"]
            b = radius_block[m]["per_run_means"]
            if a and b:
                res = mann_whitney_u(a, b)
                radius_vs_m1[m] = {"u": res.u, "p": res.p, "method": res.method}
            else:
                radius_vs_m1[m] = {"u": None, "p": None, "method": "empty"}

        recov_runs = cfg.recoverability_runs
        recov_block: dict[str, dict] = {}
        model_by_name = {m.name: m for m in subjects}
        for weak, strong in zip(tier_names, tier_names[1:]):
            cellpair = {}
            for actor, source in ((strong, weak), (weak, strong)):
                entries = pooled_entries[source][: cfg.recoverability_max_states]
                if not entries:
                    cellpair[f"{actor}_on_{source}"] = None
                    continue
                rep = recoverability(
                    model_by_name[actor], entries, track, cfg.sim,
                    runs=recov_runs,
                    seed=_combine_seed(cfg.master_seed, 4, tier_names.index(weak)),
                    noise_sigma=cfg.search.noise_sigma,
                )
                cellpair[f"{actor}_on_{source}"] = {
                    "recoverable_mean": rep.recoverable_mean,
                    "non_recoverable_mean": rep.non_recoverable_mean,
                    "overall_mean": rep.overall_mean(),
                    "states": len(rep.per_state_recoverable)
                    + len(rep.per_state_non_recoverable),
                }
            up = cellpair.get(f"{strong}_on_{weak}")
            down = cellpair.get(f"{weak}_on_{strong}")
            gap = (
                up["overall_mean"] - down["overall_mean"]
                if up and down
                else None
            )
            recov_block[f"{weak}-{strong}"] = {**cellpair, "gap": gap}

        tier_means = [float(np.mean(genbo_sizes[m])) for m in tier_names]
        trend = mann_kendall_s(tier_means)
        manifest["artifacts"]["metrics"] = ws.write_json(
            "reports/metrics.json",
            {
                "counts_mean_genbo": {
                    m: float(np.mean(genbo_sizes[m])) for m in counts
                },
                "counts_mean_baseline": {
                    m: float(np.mean(base_sizes[m])) for m in counts
                },
                "genbo_vs_baseline_pooled": {
                    "u": mw_pooled.u,
                    "p": mw_pooled.p,
                    "method": mw_pooled.method,
                    "a12": vargha_delaney_a12(pooled_g, pooled_b),
                },
                "genbo_vs_baseline_per_model": per_model_stats,
                "radius": radius_block,
                "radius_vs_m1": radius_vs_m1,
                "recoverability": recov_block,
                "tier_count_trend": {
                    "means": tier_means,
                    "s": trend.s,
                    "z": trend.z,
                    "trend": trend.trend,
                },
            },
        )
        done(stage)

        # -- evaluation tracks ---------------------------------------------
        stage = "eval_tracks"
        eval_tracks: list[Track] = []
        max_dist = cfg.eval_distance_frac * track.n
        for k in range(cfg.eval_track_count):
            rng = np.random.default_rng(_combine_seed(cfg.master_seed, 3, k))
            t = generate_evaluation_track(
                track, rng, max_dist,
                max_curvature=cfg.eval_max_curvature,
                name=f"t{k + 2}",
            )
            eval_tracks.append(t)
        eval_tracks.append(mirror_track(track, name=f"t{cfg.eval_track_count + 2}"))
        for t in eval_tracks:
            save_track(t, ws.root / "tracks" / f"{t.name}.json")
            manifest["artifacts"][t.name] = f"tracks/{t.name}.json"
        done(stage, names=[t.name for t in eval_tracks])

        # -- retraining -------------------------------------------------
        stage = "retrain"
        by_loss = sorted(ladder, key=lambda m: m.validation_loss)
        top = by_loss[: cfg.retrain_count]
        retrained: dict[str, list[tuple[int, LearnedModel]]] = {}
        retrain_rows = []
        for tier in top:
            retrained[tier.name] = []
            for r in range(cfg.repetitions):
                entries = _likely(cells[(tier.name, "genbo", r)].archive)
                row = {"model": tier.name, "rep": r, "pairs": len(entries)}
                if not entries:
                    row["status"] = "skipped_empty_archive"
                    retrain_rows.append(row)
                    continue
                try:
                    bdata = build_boundary_dataset(
                        entries, pilot, track, cfg.sim, cfg.boundary_steps
                    )
                except EmptyDataset:
                    row["status"] = "skipped_no_recovery"
                    retrain_rows.append(row)
                    continue
                new_model, info = retrain_model(
                    tier, data, bdata, cfg.hp,
                    name=f"{tier.name}_retrained_rep{r}",
                )
                try:
                    drive_nominal(new_model, track, cfg.sim, keep_trace=False)
                    row["nominal_gate"] = "pass"
                except Exception:
                    row["nominal_gate"] = "fail"
                save_model(new_model, ws.root / "models" / f"{new_model.name}.json")
                row.update(info)
                row["status"] = "retrained"
                row["file"] = f"models/{new_model.name}.json"
                retrain_rows.append(row)
                retrained[tier.name].append((r, new_model))
        done(stage, retrained={k: len(v) for k, v in retrained.items()})

        # -- success-rate evaluation ------------------------------------
        stage = "evaluate"
        all_tracks = [track] + eval_tracks
        sigma = cfg.eval_noise_sigma
        evaluation: dict[str, dict] = {}
        for tier in top:
            orig_rates = {}
            for ti, t in enumerate(all_tracks):
                orig_rates[t.name] = success_rate(
                    tier, t, cfg.success_runs, cfg.sim,
                    seed=_combine_seed(cfg.master_seed, 5, 0, ti),
                    noise_sigma=sigma,
                )
            per_rep = {}
            for r, model in retrained[tier.name]:
                rates = {}
                for ti, t in enumerate(all_tracks):
                    rates[t.name] = success_rate(
                        model, t, cfg.success_runs, cfg.sim,
                        seed=_combine_seed(cfg.master_seed, 5, 1 + r, ti),
                        noise_sigma=sigma,
                    )
                per_rep[str(r)] = rates
            mean_retrained = {
                t.name: float(np.mean([per_rep[r][t.name] for r in per_rep]))
                for t in all_tracks
            } if per_rep else {}
            eval_names = [t.name for t in eval_tracks]
            included = [n for n in eval_names if orig_rates[n] > 0.0]
            excluded = [n for n in eval_names if orig_rates[n] <= 0.0]
            ratio = None
            if per_rep and included:
                om = float(np.mean([orig_rates[n] for n in included]))
                rm = float(np.mean([mean_retrained[n] for n in included]))
                ratio = rm / om if om > 0 else None
            evaluation[tier.name] = {
                "original": orig_rates,
                "retrained_per_rep": per_rep,
                "retrained_mean": mean_retrained,
                "eval_tracks_included": included,
                "eval_tracks_excluded_original_zero": excluded,
                "improvement_ratio": ratio,
            }
        manifest["artifacts"]["evaluation"] = ws.write_json(
            "reports/evaluation.json",
            {"retraining": retrain_rows, "success_rates": evaluation,
             "episodes_per_rate": cfg.success_runs},
        )
        done(stage)

        # -- render -------------------------------------------------------
        stage = "render"
        ref_xy = np.array([[s.x, s.y] for s in trace_states[:: 5]])
        overlay = pooled_entries[tier_names[0]][:12]
        svg = render_track_svg(
            track,
            trajectories=[("reference", ref_xy)],
            entries=overlay,
            v_max_kmh=cfg.sim.v_max_kmh,
        )
        save_svg(ws.root / "renders" / "track.svg", svg)
        manifest["artifacts"]["render"] = "renders/track.svg"
        done(stage)

        manifest["status"] = "complete"
        ws.write_json("manifest.json", manifest)
        return manifest
    except Exception as exc:
        manifest["status"] = "failed"
        manifest["failed_stage"] = stage
        manifest["error"] = str(exc)
        ws.write_json("manifest.json", manifest)
        raise StageFailed(stage, exc) from exc

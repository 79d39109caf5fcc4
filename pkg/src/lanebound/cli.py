"""Command line interface.

Subcommands cover each stage of the study individually plus the full
experiment. Exit codes: 0 on success, 1 on usage errors, 2 when a stage
fails at runtime.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .boundary import ClosenessBudget, ValidityLimits
from .controllers import (
    Hyperparams,
    dataset_from_csv,
    dataset_to_csv,
    load_model,
    save_model,
    train_ladder,
    tune_autopilot,
    collect_reference_trace,
)
from .dynamics import SimConfig, drive_nominal, read_trace_csv, write_trace_csv
from .geometry import (
    compute_track_features,
    generate_evaluation_track,
    load_track,
    make_training_track,
    mirror_track,
    save_track,
)
from .metrics import success_rate
from .pipeline import (
    StageFailed,
    apply_env_overrides,
    build_boundary_dataset,
    load_config,
    micro_config,
    paper_config,
    quickstart_config,
    retrain_model,
    run_experiment,
)
from .render import render_track_svg, save_svg
from .search import SearchConfig, baseline_search, genbo_search, load_archive, save_archive


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; this interface uses 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _existing_file(value: str) -> Path:
    p = Path(value)
    if not p.is_file():
        raise argparse.ArgumentTypeError(f"no such file: {value}")
    return p


def _load_track_arg(args) -> "Track":
    if getattr(args, "track", None) is not None:
        return load_track(args.track)
    return make_training_track()


# ---------------------------------------------------------------------------
# subcommands


def _cmd_tune_autopilot(args) -> int:
    track = _load_track_arg(args)
    pilot = tune_autopilot(track, SimConfig())
    save_model(pilot, args.out)
    if args.track_out:
        save_track(track, args.track_out)
        print(f"track written to {args.track_out}")
    print(f"autopilot gains: {pilot.gains()}")
    print(f"model written to {args.out}")
    return 0


def _cmd_collect_trace(args) -> int:
    track = load_track(args.track)
    model = load_model(args.model)
    trace, data = collect_reference_trace(
        model, track, SimConfig(), args.laps,
        explore_amplitude=args.explore, label_noise=args.label_noise,
        label_noise_decay=args.label_noise_decay,
        label_noise_hold=args.label_noise_hold,
        sample_stride=args.sample_stride, seed=args.seed,
    )
    write_trace_csv(trace, args.trace_out)
    dataset_to_csv(data, args.data_out)
    print(f"{len(data)} samples over {args.laps} laps")
    print(f"trace written to {args.trace_out}")
    print(f"dataset written to {args.data_out}")
    return 0


def _cmd_train_ladder(args) -> int:
    track = load_track(args.track)
    data = dataset_from_csv(args.data)
    hp = Hyperparams(ridge_lambda=args.ridge_lambda)
    ladder = train_ladder(data, hp, track, SimConfig(), args.seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for m in ladder:
        save_model(m, out_dir / f"{m.name}.json")
        print(f"{m.name}: validation loss {m.validation_loss:.6f}")
    print(f"models written to {out_dir}")
    return 0


def _cmd_search(args) -> int:
    track = load_track(args.track)
    model = load_model(args.model)
    trace_states = [row.state for row in read_trace_csv(args.trace)]
    scfg = SearchConfig(
        restarts=args.restarts,
        iterations=args.iterations,
        chain_length=args.chain_length,
        noise_sigma=args.noise_sigma,
    )
    fn = genbo_search if args.algo == "genbo" else baseline_search
    report = fn(
        model, track, trace_states, SimConfig(), scfg,
        ValidityLimits(), ClosenessBudget(), args.seed,
    )
    save_archive(report.archive, args.out)
    print(
        f"{args.algo}: {len(report.archive)} pairs archived in "
        f"{report.pair_executions} pair executions "
        f"({report.episode_count} episodes)"
    )
    print(f"archive written to {args.out}")
    return 0


def _cmd_metrics(args) -> int:
    run = Path(args.run_dir)
    with open(run / "reports" / "metrics.json", encoding="utf-8") as fh:
        metrics = json.load(fh)
    gen = metrics["counts_mean_genbo"]
    base = metrics["counts_mean_baseline"]
    rad = metrics["radius"]
    print(f"{'model':<12}{'genbo':>8}{'baseline':>10}{'radius':>8}")
    for name in gen:
        r = rad.get(name, {}).get("pooled_mean")
        r_txt = f"{r:.3f}" if r is not None else "-"
        print(f"{name:<12}{gen[name]:>8.2f}{base[name]:>10.2f}{r_txt:>8}")
    pooled = metrics["genbo_vs_baseline_pooled"]
    print(
        f"genbo vs baseline pooled: U={pooled['u']:.1f} p={pooled['p']:.4g} "
        f"A12={pooled['a12']:.3f}"
    )
    for pair, cell in metrics.get("recoverability", {}).items():
        gap = cell.get("gap")
        gap_txt = f"{gap:+.1f}" if gap is not None else "-"
        print(f"recoverability gap {pair}: {gap_txt} points")
    return 0


def _cmd_gen_tracks(args) -> int:
    base = load_track(args.track)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    max_dist = args.max_distance if args.max_distance else 0.3 * base.n
    written = []
    for k in range(args.count):
        rng = np.random.default_rng([args.seed, k])
        t = generate_evaluation_track(
            base, rng, max_dist,
            max_curvature=args.max_curvature,
            name=f"{base.name}_eval{k + 1}",
        )
        written.append(t)
    written.append(mirror_track(base))
    for t in written:
        path = out_dir / f"{t.name}.json"
        save_track(t, path)
        f = compute_track_features(t, reference=base)
        print(
            f"{t.name}: curvature {f.curvature:.4f}, turns {f.num_turns}, "
            f"distance {f.distance_from_reference:.1f} m -> {path}"
        )
    return 0


def _cmd_retrain(args) -> int:
    track = load_track(args.track)
    model = load_model(args.model)
    pilot = load_model(args.autopilot)
    data = dataset_from_csv(args.data)
    entries = load_archive(args.archive)
    cfg = SimConfig()
    boundary = build_boundary_dataset(entries, pilot, track, cfg, args.steps)
    hp = Hyperparams(ridge_lambda=model.ridge_lambda)
    new_model, info = retrain_model(model, data, boundary, hp)
    drive_nominal(new_model, track, cfg, keep_trace=False)
    save_model(new_model, args.out)
    print(
        f"retrained on {info['boundary_samples']} boundary samples; "
        f"validation loss {info['val_loss_before']:.6f} -> "
        f"{info['val_loss_after']:.6f}"
    )
    print(f"model written to {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    model = load_model(args.model)
    rates = {}
    for ti, path in enumerate(args.tracks):
        track = load_track(path)
        rates[track.name] = success_rate(
            model, track, args.episodes, SimConfig(),
            seed=args.seed + ti, noise_sigma=args.noise_sigma,
        )
        print(f"{track.name}: {rates[track.name]:.1f}%")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(rates, fh, indent=2, sort_keys=True)
            fh.write("\n")
        print(f"rates written to {args.json}")
    return 0


def _cmd_experiment(args) -> int:
    if args.config:
        cfg = load_config(args.config)
    else:
        factory = {
            "quickstart": quickstart_config,
            "paper": paper_config,
            "micro": micro_config,
        }[args.profile]
        cfg = apply_env_overrides(factory())
    if args.seed is not None:
        cfg = replace(cfg, master_seed=args.seed)
    if args.output_dir:
        cfg = replace(cfg, output_dir=args.output_dir)
    manifest = run_experiment(cfg)
    print(f"experiment complete: {cfg.output_dir}")
    for stage in manifest["stages"]:
        print(f"  stage {stage['name']}: done")
    return 0


def _cmd_render(args) -> int:
    track = load_track(args.track)
    entries = load_archive(args.archive) if args.archive else []
    trajectories = []
    if args.trace:
        rows = read_trace_csv(args.trace)
        xy = np.array([[r.state.x, r.state.y] for r in rows])
        trajectories.append(("trace", xy))
    svg = render_track_svg(track, trajectories=trajectories, entries=entries)
    save_svg(args.out, svg)
    print(f"svg written to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> _Parser:
    parser = _Parser(prog="lanebound", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tune-autopilot", help="tune PID gains on a track")
    p.add_argument("--track", type=_existing_file, help="track JSON (default: built-in track)")
    p.add_argument("--out", default="autopilot.json")
    p.add_argument("--track-out", help="also write the track used")
    p.set_defaults(fn=_cmd_tune_autopilot)

    p = sub.add_parser("collect-trace", help="drive laps and label every state")
    p.add_argument("--model", type=_existing_file, required=True)
    p.add_argument("--track", type=_existing_file, required=True)
    p.add_argument("--laps", type=int, default=3)
    p.add_argument("--explore", type=float, default=0.0,
                   help="steering burst amplitude widening the visited envelope")
    p.add_argument("--label-noise", type=float, default=0.0,
                   help="zero-mean jitter on the demonstrated steering")
    p.add_argument("--label-noise-decay", type=float, default=1.0,
                   help="per-lap multiplicative decay of the jitter")
    p.add_argument("--label-noise-hold", type=int, default=1,
                   help="warm-up laps at full jitter before decay")
    p.add_argument("--sample-stride", type=int, default=1,
                   help="label every stride-th frame")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trace-out", default="reference.csv")
    p.add_argument("--data-out", default="dataset.csv")
    p.set_defaults(fn=_cmd_collect_trace)

    p = sub.add_parser("train-ladder", help="train the model quality ladder")
    p.add_argument("--data", type=_existing_file, required=True)
    p.add_argument("--track", type=_existing_file, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ridge-lambda", type=float, default=Hyperparams().ridge_lambda)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(fn=_cmd_train_ladder)

    p = sub.add_parser("search", help="search for boundary state pairs")
    p.add_argument("--algo", choices=("genbo", "baseline"), required=True)
    p.add_argument("--model", type=_existing_file, required=True)
    p.add_argument("--track", type=_existing_file, required=True)
    p.add_argument("--trace", type=_existing_file, required=True,
                   help="reference trace CSV to seed from")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--restarts", type=int, default=SearchConfig().restarts)
    p.add_argument("--iterations", type=int, default=SearchConfig().iterations)
    p.add_argument("--chain-length", type=int, default=SearchConfig().chain_length)
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--out", default="archive.json")
    p.set_defaults(fn=_cmd_search)

    p = sub.add_parser("metrics", help="print the metrics matrix of a run")
    p.add_argument("--run-dir", required=True, help="experiment output directory")
    p.set_defaults(fn=_cmd_metrics)

    p = sub.add_parser("gen-tracks", help="generate harder evaluation tracks")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--track", type=_existing_file, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-distance", type=float)
    p.add_argument("--max-curvature", type=float, default=0.13)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(fn=_cmd_gen_tracks)

    p = sub.add_parser("retrain", help="retrain a model on boundary data")
    p.add_argument("--model", type=_existing_file, required=True)
    p.add_argument("--data", type=_existing_file, required=True,
                   help="the nominal dataset the model was trained on")
    p.add_argument("--archive", type=_existing_file, required=True)
    p.add_argument("--autopilot", type=_existing_file, required=True)
    p.add_argument("--track", type=_existing_file, required=True)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--out", default="retrained.json")
    p.set_defaults(fn=_cmd_retrain)

    p = sub.add_parser("evaluate", help="success rates of a model on tracks")
    p.add_argument("--model", type=_existing_file, required=True)
    p.add_argument("--tracks", type=_existing_file, nargs="+", required=True)
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--json", help="also write rates to this JSON file")
    p.set_defaults(fn=_cmd_evaluate)

    p = sub.add_parser("experiment", help="run the full experiment")
    p.add_argument("--config", type=_existing_file, help="RunConfig JSON file")
    p.add_argument("--profile", choices=("quickstart", "paper", "micro"),
                   default="quickstart")
    p.add_argument("--seed", type=int)
    p.add_argument("--output-dir")
    p.set_defaults(fn=_cmd_experiment)

    p = sub.add_parser("render", help="render a track with overlays to SVG")
    p.add_argument("--track", type=_existing_file, required=True)
    p.add_argument("--archive", type=_existing_file)
    p.add_argument("--trace", type=_existing_file)
    p.add_argument("--out", default="track.svg")
    p.set_defaults(fn=_cmd_render)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except StageFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # any stage-level failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())

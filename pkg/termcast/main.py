"""Command-line entry point for TERMCast."""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from eval.evaluator import BASELINE_FILE, print_table, run_ablation, run_fusion_sweep
from termcast.components import PreparedDataset, prepare_dataset
from termcast.config import LOG_LEVEL, OUT_DIR, SYNTH_PERSISTENCE, SYNTH_TRANSFER, RunConfig
from termcast.errors import ConfigError, TermCastError
from termcast.flow_grid import RegionGrid, build_flow_series, read_flow_series, read_trajectories_csv, write_flow_series
from termcast.gradcheck import run_suite, suite_passed
from termcast.termcast_model import load_checkpoint, save_checkpoint
from termcast.training import evaluate, fit_and_evaluate, ha_baseline, synth_generate

logger = logging.getLogger(__name__)

CONFIG_HELP = """\
configuration file (INI style, every key optional):

  [model]       d_relation, heads, transformer_depth, conv_filters, conv_layers,
                g_hidden, mlp_r_hidden, mlp_extra_hidden, fusion (C0-C5),
                variant (full, V1, V2, V3), alpha, beta,
                height / width / intervals_per_day (checked against the data)
  [train]       epochs, batch_size, lr, seed, early_stop_patience, validation_fraction
  [data]        path, train_fraction
  [experiment]  seeds (e.g. "0, 1, 2, 3, 4"), workers

Unknown sections or keys are rejected. The resolved configuration is written
to <out>/run_config.cfg (for ingest and synth, next to the output file
unless --out is given).

exit codes: 0 success, 1 gradient check failure, 2 input/config error, 3 numerics error
"""


# ============= Helpers =============

def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Config file (or defaults) with command-line overrides applied."""
    run_config = RunConfig.from_file(args.config) if args.config else RunConfig()
    return run_config.with_overrides(
        model={"variant": args.variant, "fusion": args.fusion},
        train={"seed": args.seed},
        data={"path": args.data},
        experiment={"workers": args.workers, "seeds": getattr(args, "seeds", None)},
    )


def load_dataset(run_config: RunConfig) -> PreparedDataset:
    if not run_config.data.path:
        raise ConfigError("no dataset given: pass --data or set [data] path")
    series = read_flow_series(run_config.data.path)
    logger.info("Loaded %s: L=%d H=%d W=%d", run_config.data.path, len(series), series.height, series.width)
    return prepare_dataset(series, run_config.data.train_fraction)


def output_dir(args: argparse.Namespace, run_config: RunConfig, default: Optional[Path] = None) -> Path:
    """
    Create the output directory and echo the resolved configuration into it.

    ``--out`` wins, then ``default``, then ``OUT_DIR``.
    """
    out = Path(args.out or default or OUT_DIR)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.cfg").write_text(run_config.to_text())
    return out


def resolved_model_config(run_config: RunConfig, dataset: PreparedDataset):
    series = dataset.series
    return run_config.model.for_series(series.height, series.width, series.intervals_per_day)


# ============= Commands =============

def cmd_ingest(args, run_config: RunConfig) -> int:
    trajectories = read_trajectories_csv(args.trajectories)
    lon_min, lon_max, lat_min, lat_max = args.bounds
    grid = RegionGrid(args.height, args.width, (lon_min, lon_max, lat_min, lat_max))

    timestamps = [p.timestamp for traj in trajectories for p in traj.points]
    start = args.start if args.start is not None else (
        min(timestamps) // args.interval * args.interval if timestamps else 0)
    end = args.end if args.end is not None else (max(timestamps) + 1 if timestamps else start + args.interval)

    series = build_flow_series(trajectories, grid, start, end, args.interval,
                               workers=run_config.experiment.workers, show_progress=args.progress)
    write_flow_series(series, args.output)
    output_dir(args, run_config, default=Path(args.output).parent)
    inflow, outflow = series.values[:, 0].sum(), series.values[:, 1].sum()
    print(f"L={len(series)} H={series.height} W={series.width} inflow={inflow:.0f} outflow={outflow:.0f}")
    print(f"Wrote {args.output} ({len(trajectories)} trajectories)")
    return 0


def cmd_synth(args, run_config: RunConfig) -> int:
    series = synth_generate(
        seed=run_config.train.seed, height=args.height, width=args.width, weeks=args.weeks,
        interval_hours=args.interval_hours, daily_amp=args.daily_amp, weekly_amp=args.weekly_amp,
        noise_std=args.noise_std, persistence=tuple(args.persistence), transfer=args.transfer,
    )
    write_flow_series(series, args.output)
    output_dir(args, run_config, default=Path(args.output).parent)
    print(f"L={len(series)} H={series.height} W={series.width} intervals_per_day={series.intervals_per_day}")
    print(f"Wrote {args.output}")
    return 0


def cmd_train(args, run_config: RunConfig) -> int:
    dataset = load_dataset(run_config)
    out = output_dir(args, run_config)
    model, report = fit_and_evaluate(dataset, resolved_model_config(run_config, dataset), run_config.train,
                                     run_config.train.seed, show_progress=args.progress)
    save_checkpoint(model, out / "model.tcm")
    (out / "report.json").write_text(report.model_dump_json(indent=2))
    print(f"Test RMSE: {report.rmse:.4f}  MAE: {report.mae:.4f}  epochs: {report.epochs_ran}")
    print(f"Checkpoint saved to {out / 'model.tcm'}")
    return 0


def cmd_eval(args, run_config: RunConfig) -> int:
    dataset = load_dataset(run_config)
    model = load_checkpoint(args.checkpoint, resolved_model_config(run_config, dataset))
    report = evaluate(model, dataset.test_instances, dataset.norm)
    out = output_dir(args, run_config)
    (out / "eval_report.json").write_text(report.model_dump_json(indent=2))
    print(f"Test RMSE: {report.rmse:.4f}  MAE: {report.mae:.4f}  ({len(dataset.test_instances)} instances)")
    return 0


def _cmd_experiment(args, run_config: RunConfig, harness, filename: str) -> int:
    dataset = load_dataset(run_config)
    out = output_dir(args, run_config)
    table = harness(dataset, resolved_model_config(run_config, dataset), run_config.train,
                    seeds=run_config.experiment.seeds, workers=run_config.experiment.workers,
                    show_progress=args.progress)
    table.to_csv(out / filename)
    if table.baseline is not None:
        (out / BASELINE_FILE).write_text(table.baseline.model_dump_json(indent=2))
    print_table(table)
    print(f"\nResults saved to {out / filename}")
    return 0


def cmd_ablate(args, run_config: RunConfig) -> int:
    return _cmd_experiment(args, run_config, run_ablation, "ablation.csv")


def cmd_sweep_fusion(args, run_config: RunConfig) -> int:
    return _cmd_experiment(args, run_config, run_fusion_sweep, "fusion.csv")


def cmd_gradcheck(args, run_config: RunConfig) -> int:
    output_dir(args, run_config)
    results = run_suite(show_progress=args.progress)
    failures = [r for r in results if not r.passed]
    worst = max(results, key=lambda r: r.max_rel_error)
    print(f"Gradient checks: {len(results) - len(failures)}/{len(results)} passed "
          f"(worst {worst.name} seed={worst.seed}: {worst.max_rel_error:.2e})")
    for r in failures:
        print(f"  FAILED {r.name} seed={r.seed} shape={r.shape} rel_err={r.max_rel_error:.3e}")
    return 0 if suite_passed(results) else 1


def cmd_ha(args, run_config: RunConfig) -> int:
    dataset = load_dataset(run_config)
    report = ha_baseline(dataset.train_series, dataset.test_instances, dataset.norm)
    out = output_dir(args, run_config)
    (out / BASELINE_FILE).write_text(report.model_dump_json(indent=2))
    print(f"HA RMSE: {report.rmse:.4f}  MAE: {report.mae:.4f}  ({len(dataset.test_instances)} instances)")
    return 0


# ============= Parser =============

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="configuration file (see the top-level help)")
    common.add_argument("--seed", type=int, help="seed for initialization, batch order and synthesis")
    common.add_argument("--out", help=f"output directory (default: {OUT_DIR})")
    common.add_argument("--data", help="UFS1 flow series file")
    common.add_argument("--variant", type=str.lower, choices=["full", "v1", "v2", "v3"])
    common.add_argument("--fusion", type=str.lower, choices=[f"c{i}" for i in range(6)])
    common.add_argument("--workers", type=int, help="threads for ingestion and experiment fan-out")
    common.add_argument("--progress", action="store_true", help="show progress bars")

    parser = argparse.ArgumentParser(
        prog="termcast", description="Urban flow forecasting with periodic relation modeling.",
        epilog=CONFIG_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    ingest = sub.add_parser("ingest", parents=[common], help="bin trajectories into a UFS1 flow series")
    ingest.add_argument("trajectories", help="CSV with traj_id,timestamp,lon,lat")
    ingest.add_argument("output", help="UFS1 file to write")
    ingest.add_argument("--height", type=int, required=True)
    ingest.add_argument("--width", type=int, required=True)
    ingest.add_argument("--bounds", type=float, nargs=4, required=True,
                        metavar=("LON_MIN", "LON_MAX", "LAT_MIN", "LAT_MAX"))
    ingest.add_argument("--interval", type=int, default=3600, help="interval length in seconds")
    ingest.add_argument("--start", type=int, help="epoch seconds of interval 0 (default: first timestamp)")
    ingest.add_argument("--end", type=int, help="exclusive end in epoch seconds (default: after the last timestamp)")
    ingest.set_defaults(func=cmd_ingest)

    synth = sub.add_parser("synth", parents=[common], help="generate a seeded periodic flow series")
    synth.add_argument("output", help="UFS1 file to write")
    synth.add_argument("--height", type=int, default=8)
    synth.add_argument("--width", type=int, default=8)
    synth.add_argument("--weeks", type=int, default=6)
    synth.add_argument("--interval-hours", type=float, default=1.0)
    synth.add_argument("--daily-amp", type=float, default=8.0)
    synth.add_argument("--weekly-amp", type=float, default=4.0)
    synth.add_argument("--noise-std", type=float, default=1.0)
    synth.add_argument("--persistence", type=float, nargs=2, default=list(SYNTH_PERSISTENCE), metavar=("LOW", "HIGH"),
                       help="range of the lag-one noise coefficient per series")
    synth.add_argument("--transfer", type=float, default=SYNTH_TRANSFER,
                       help="share of outflow anomaly passed to a linked region as inflow")
    synth.set_defaults(func=cmd_synth)

    train = sub.add_parser("train", parents=[common], help="train one model and score it on the test split")
    train.set_defaults(func=cmd_train)

    evaluate_cmd = sub.add_parser("eval", parents=[common], help="score a checkpoint on the test split")
    evaluate_cmd.add_argument("checkpoint", help="TCM1 checkpoint")
    evaluate_cmd.set_defaults(func=cmd_eval)

    for name, func, text in (("ablate", cmd_ablate, "variants full, V1, V2, V3 over all seeds"),
                             ("sweep-fusion", cmd_sweep_fusion, "fusion modes C0-C5 over all seeds")):
        experiment = sub.add_parser(name, parents=[common], help=text)
        experiment.add_argument("--seeds", help='seed list, e.g. "0,1,2,3,4"')
        experiment.set_defaults(func=func)

    sub.add_parser("gradcheck", parents=[common], help="run the finite-difference gradient suite") \
        .set_defaults(func=cmd_gradcheck)
    sub.add_parser("ha", parents=[common], help="historical-average baseline on the test split") \
        .set_defaults(func=cmd_ha)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=LOG_LEVEL, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        run_config = resolve_config(args)
        return args.func(args, run_config)
    except TermCastError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

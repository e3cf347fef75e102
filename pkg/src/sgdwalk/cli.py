"""Command line interface.

Subcommands::

    sgd-walk run    --experiment NAME [options]   execute a recipe
    sgd-walk plot   --run DIR                     render SVGs from run CSVs
    sgd-walk verify --run DIR                     re-hash artifacts vs manifest

Exit codes: 0 success, 1 verify found mismatched artifacts, 2 configuration
error, 3 numeric divergence during training, 4 I/O error (missing or
malformed input files).
"""

import argparse
import sys
from pathlib import Path

from .config import (
    EXPERIMENTS,
    ConfigError,
    build_config,
    parse_config_file,
    parse_noise_flag,
    parse_schedule_flag,
)
from .data import IdxFormatError
from .optim import DivergenceError


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sgd-walk",
        description="Training-trajectory experiments: loss interpolation "
                    "between iterates, gradient geometry, and curvature.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute one experiment recipe")
    run.add_argument("--experiment", required=True, choices=EXPERIMENTS,
                     help="recipe to execute")
    run.add_argument("--config", help="config file (sectioned key=value)")
    run.add_argument("--out", help="output directory (default runs/EXPERIMENT)")
    run.add_argument("--seed", type=int, default=0,
                     help="master seed; all random streams derive from it")
    run.add_argument("--data", choices=["blobs", "idx"],
                     help="dataset source")
    run.add_argument("--images", help="IDX image file (idx source)")
    run.add_argument("--labels", help="IDX label file (idx source)")
    run.add_argument("--limit", type=int, help="cap on loaded samples")
    run.add_argument("--batch-size", type=int, help="minibatch size")
    run.add_argument("--epochs", type=int, help="training epochs")
    run.add_argument("--lr", type=float, help="learning rate (skips tuning)")
    run.add_argument("--lr-schedule", metavar="SPEC",
                     help="kind[:params], e.g. constant:0.1, "
                          "stepwise:0.1,0.5,100, cyclical:0.01,0.1,25, "
                          "trapezoid:0.01,0.1,75,75,75")
    run.add_argument("--noise", metavar="SPEC",
                     help="'none' or 'iso:FACTOR'")
    run.add_argument("--eval-period", type=int,
                     help="full-dataset evaluation period in epochs")
    run.add_argument("--workers", type=int,
                     help="threads for interpolation slicing")

    plot = sub.add_parser("plot", help="render SVG plots from a finished run")
    plot.add_argument("--run", required=True, help="run directory")

    verify = sub.add_parser("verify",
                            help="check run artifacts against the manifest")
    verify.add_argument("--run", required=True, help="run directory")
    return parser


def _collect_overrides(args):
    overrides = {}
    if args.data:
        overrides[("data", "source")] = args.data
    if args.images:
        overrides[("data", "images")] = args.images
    if args.labels:
        overrides[("data", "labels")] = args.labels
    if args.limit is not None:
        overrides[("data", "limit")] = args.limit
    if args.batch_size is not None:
        overrides[("optim", "batch_size")] = args.batch_size
    if args.epochs is not None:
        overrides[("optim", "epochs")] = args.epochs
    if args.lr is not None:
        overrides[("optim", "lr")] = args.lr
    if args.lr_schedule:
        overrides.update(parse_schedule_flag(args.lr_schedule))
    if args.noise:
        overrides.update(parse_noise_flag(args.noise))
    if args.eval_period is not None:
        overrides[("optim", "eval_period")] = args.eval_period
    if args.workers is not None:
        overrides[("walk", "workers")] = args.workers
    return overrides


def cmd_run(args):
    from .runner import run_experiment

    file_values = parse_config_file(args.config) if args.config else {}
    out_dir = args.out or str(Path("runs") / args.experiment)
    cfg = build_config(args.experiment, out_dir, args.seed,
                       file_values=file_values,
                       overrides=_collect_overrides(args))
    manifest = run_experiment(cfg)
    print(f"run complete: {args.experiment} -> {out_dir}")
    print(f"config digest: {manifest['config_digest']}")
    for key, value in sorted(manifest["result"].items()):
        print(f"  {key}: {value}")
    print(f"artifacts: {len(manifest['files'])} files")
    return 0


def cmd_plot(args):
    from .plots import render_plots
    from .runner import refresh_manifest

    written = render_plots(args.run)
    for path in written:
        print(f"wrote {path}")
    if refresh_manifest(args.run) is not None:
        print("manifest refreshed")
    return 0


def cmd_verify(args):
    from .runner import verify_run

    problems = verify_run(args.run)
    if problems:
        for problem in problems:
            print(problem)
        print(f"verify FAILED: {len(problems)} mismatched artifacts")
        return 1
    print("verify OK: all artifacts match the manifest")
    return 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    from .plots import PlotDataError
    from .runner import ManifestError

    try:
        if args.command == "run":
            return cmd_run(args)
        if args.command == "plot":
            return cmd_plot(args)
        return cmd_verify(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 3
    except (PlotDataError, ManifestError, IdxFormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main(argv=None))

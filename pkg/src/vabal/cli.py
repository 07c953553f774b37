"""Command-line entry point: ``vabal generate|run|sweep|report``."""

import argparse
import json
import logging
import sys

from .data import build_dataset, write_csv
from .errors import ContractError, DegeneratePoolError, ParseError
from .harness import ExperimentConfig, SWEEP_AXES, parse_sweep_values, report, run_experiment, sweep


def _cmd_generate(args):
    with open(args.spec) as fh:
        recipe = json.load(fh)
    # a bare mixture spec is accepted as well as a full dataset recipe
    if "mixture" not in recipe and "csv" not in recipe:
        recipe = {"mixture": recipe}
    ds = build_dataset(recipe)
    write_csv(ds, args.out)
    print(f"wrote {len(ds)} samples ({ds.num_classes} classes) to {args.out}")


def _cmd_run(args):
    config = ExperimentConfig.load(args.config)
    if args.out:
        config.output_dir = args.out
    results = run_experiment(config)
    for seed, records in results.items():
        last = records[-1] if records else None
        acc = f"{last.accuracy:.4f}" if last else "n/a"
        print(f"seed {seed}: {len(records)} rounds, final accuracy {acc}")
    print(f"results in {config.output_dir}")


def _cmd_sweep(args):
    config = ExperimentConfig.load(args.config)
    if args.out:
        config.output_dir = args.out
    values = parse_sweep_values(args.axis, args.values)
    results = sweep(config, args.axis, values)
    for value, per_seed in results.items():
        finals = [recs[-1].accuracy for recs in per_seed.values() if recs]
        mean = sum(finals) / len(finals) if finals else float("nan")
        print(f"{args.axis}={value}: mean final accuracy {mean:.4f}")


def _cmd_report(args):
    summary = report(args.dir)
    for label, s in summary.items():
        print(f"{label}: avg {s['avg']:.4f} final {s['final']:.4f}")


def build_parser():
    parser = argparse.ArgumentParser(prog="vabal", description="Active learning with a class-regularized VAE.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="materialise a synthetic dataset as CSV")
    p.add_argument("--spec", required=True, help="JSON mixture spec or dataset recipe")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("run", help="run an experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="override output_dir")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("sweep", help="run one experiment per value of an axis")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--out", help="override output_dir")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("report", help="aggregate per-seed CSVs in a directory")
    p.add_argument("--dir", required=True)
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (ContractError, ParseError, DegeneratePoolError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

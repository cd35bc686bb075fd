"""Command line entry point: isac-sim run | validate-config | plot."""
from __future__ import annotations

import argparse
import json
import sys

from .harness import SUITES, ConfigError, config_from_mapping, emit_plot_script, load_config, run_experiment, run_header


def _config(args, **overrides):
    if args.config:
        return load_config(args.config, getattr(args, "preset", None), **overrides)
    return config_from_mapping({}, getattr(args, "preset", None), **overrides)


def _cmd_run(args) -> int:
    ec = _config(args, suite=args.suite, seed=args.seed, out=args.out, workers=args.workers,
                 trials=args.trials)
    header = run_header(ec)
    print(json.dumps(header, sort_keys=True), flush=True)
    path = run_experiment(ec)
    print(path)
    return 0


def _cmd_validate(args) -> int:
    ec = _config(args)
    print(json.dumps(run_header(ec), sort_keys=True))
    print("config OK")
    return 0


def _cmd_plot(args) -> int:
    text = emit_plot_script(args.csv)
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="isac-sim", description="Near-field OCDM ISAC simulator")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment suite")
    r.add_argument("--suite", required=True, choices=SUITES)
    r.add_argument("--config", help="YAML config file (defaults when omitted)")
    r.add_argument("--seed", type=int, default=None, help="master seed (u64)")
    r.add_argument("--out", default=None, help="output directory")
    r.add_argument("--preset", choices=["desk"], default=None)
    r.add_argument("--workers", type=int, default=None, help="worker processes")
    r.add_argument("--trials", type=int, default=None, help="override the trial count")
    r.set_defaults(func=_cmd_run)

    v = sub.add_parser("validate-config", help="check a config file and print the run header")
    v.add_argument("config", nargs="?")
    v.add_argument("--preset", choices=["desk"], default=None)
    v.set_defaults(func=_cmd_validate)

    pl = sub.add_parser("plot", help="emit a plotting script for result CSVs")
    pl.add_argument("csv", nargs="+")
    pl.add_argument("-o", "--output", help="write the script here instead of stdout")
    pl.set_defaults(func=_cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "seed", None) is not None and not 0 <= args.seed < 2 ** 64:
        print("error: seed must be an unsigned 64-bit integer", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

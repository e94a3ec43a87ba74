"""``stsm`` command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 shape/contract/format error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from . import experiment
from .config import ExperimentConfig, apply_overrides, load_config
from .errors import ConfigError, STSMError

COMMANDS = ("train", "sweep-alpha", "sweep-pattern", "cost", "bench-shift")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stsm", description="Spatio-temporal shift experiments at toy scale.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="flat key=value config file ('#' starts a comment)")
    parser.add_argument("--out", help="output directory (overrides 'out' in the config)")
    parser.add_argument("--seed", type=int, help="random seed (overrides 'seed' in the config)")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; may be repeated")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    pairs = []
    for item in args.set:
        key, _, value = item.partition("=")
        pairs.append((0, key.strip(), value))
    config = apply_overrides(config, pairs, "--set")
    if args.out is not None:
        config = replace(config, out=args.out)
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        config = replace(config, seed=args.seed)
    return config.validate()


def run(args) -> int:
    config = resolve_config(args)
    out = config.out
    if args.command == "train":
        record = experiment.cmd_train(config, out)
        print(f"final eval accuracy {record.final_accuracy:.4f} -> {out}/run.csv")
    elif args.command == "sweep-alpha":
        print(experiment.cmd_sweep_alpha(config, out), end="")
    elif args.command == "sweep-pattern":
        print(experiment.cmd_sweep_pattern(config, out), end="")
    elif args.command == "cost":
        print(experiment.cmd_cost(config, out), end="")
    elif args.command == "bench-shift":
        timing, _ = experiment.cmd_bench_shift(config, out)
        print(experiment.csv_text(experiment.BENCH_COLUMNS, timing), end="")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except STSMError as exc:
        print(f"stsm: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())

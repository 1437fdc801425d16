"""Operator command line.

Four file-mediated stages over one run directory:

    selctl generate --config cfg.json --out runs/bench
    selctl train    --config cfg.json --out runs/bench
    selctl evaluate --config cfg.json --out runs/bench --workers 4
    selctl analyze  --config cfg.json --out runs/bench

Flags override the config file: --seed, --strategy and --k apply to the
section the subcommand reads.  Exit codes: 0 success, 2 config error,
3 data error, 4 numerical abort.  SELCTL_LOG sets the log level.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import __version__, experiment
from .errors import (
    EXIT_CONFIG,
    EXIT_DATA,
    EXIT_NUMERICAL,
    EXIT_OK,
    ConfigError,
    DataError,
    NumericalAbort,
)

_COMMANDS = {
    "generate": experiment.run_generate,
    "train": experiment.run_train,
    "evaluate": experiment.run_evaluate,
    "analyze": experiment.run_analyze,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="selctl",
        description="Selective-labeling experiments: synthetic episodes, "
        "trainable selectors, evaluation sweeps, and analyses.",
    )
    parser.add_argument("--version", action="version", version=f"selctl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "generate": "synthesize the dataset and task manifest",
        "train": "meta-train a trainable selector",
        "evaluate": "score all strategies on meta-test across a K sweep",
        "analyze": "selection composition, improvement CIs, Wasserstein tables",
    }
    for name, help_text in helps.items():
        s = sub.add_parser(name, help=help_text)
        s.add_argument("--config", help="JSON config file (defaults apply otherwise)")
        s.add_argument("--seed", type=int, help="override the config seed")
        s.add_argument("--workers", type=int, default=1, help="parallel workers")
        s.add_argument("--strategy", help="strategy override (see subcommand docs)")
        s.add_argument("--k", help="comma-separated label budgets override")
        s.add_argument("--out", required=True, help="run directory")
        s.add_argument("--force", action="store_true", help="overwrite existing outputs")
    return parser


def _parse_k_list(text: str):
    try:
        values = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"--k expects comma-separated integers, got {text!r}")
    if not values:
        raise ConfigError("--k got an empty list")
    return values


def overrides_from_args(args) -> dict:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.strategy is not None:
        if args.command == "train":
            overrides.setdefault("train", {})["strategy"] = args.strategy
        elif args.command == "evaluate":
            overrides.setdefault("evaluate", {})["strategies"] = [args.strategy]
        elif args.command == "analyze":
            overrides.setdefault("analyze", {})["reference"] = args.strategy
        else:
            raise ConfigError("--strategy does not apply to generate")
    if args.k is not None:
        k_list = _parse_k_list(args.k)
        if args.command == "train":
            if len(k_list) != 1:
                raise ConfigError("train takes a single --k")
            overrides.setdefault("train", {})["k"] = k_list[0]
        elif args.command == "evaluate":
            overrides.setdefault("evaluate", {})["k_list"] = k_list
        elif args.command == "analyze":
            if len(k_list) != 1:
                raise ConfigError("analyze takes a single --k")
            overrides.setdefault("analyze", {})["k"] = k_list[0]
        else:
            raise ConfigError("--k does not apply to generate")
    return overrides


def _setup_logging():
    level_name = os.environ.get("SELCTL_LOG", "INFO").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        level = logging.INFO
    logging.basicConfig(
        level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s"
    )


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging()
    try:
        cfg = experiment.effective_config(args.config, overrides_from_args(args))
        _COMMANDS[args.command](cfg, args.out, force=args.force, workers=args.workers)
    except ConfigError as e:
        print(f"selctl: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as e:
        print(f"selctl: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalAbort as e:
        print(f"selctl: numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def entrypoint():
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()

"""Command line: ``freegrad list | run <config> | check <suite>``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Sequence

from ..numcore import FreegradError
from .acceptance import SuiteOptions, resolve_suite, run_suite
from .config import ExperimentConfig, load_config
from .experiments import REGISTRY, default_config, run_experiment


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, action="append", help="seed (repeat for several); overrides the config")
    p.add_argument("--out-dir", help="output directory; overrides the config")
    p.add_argument("--subset", type=int, help="use only the first N training examples of the dataset")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="freegrad", description="Predictive coding and credit assignment experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("list", help="list registered experiments")
    run = sub.add_parser("run", help="run an experiment from a config file or by name")
    run.add_argument("config", help="path to a config file, or a registered experiment name")
    run.add_argument("--epochs", type=int, help="override train.epochs")
    _common(run)
    check = sub.add_parser("check", help="run acceptance criteria; exit status 0 only if all pass")
    check.add_argument("suite", nargs="?", default="all", help="all, fast, or criterion numbers like 1,7,9")
    check.add_argument("--quiet", action="store_true", help="only the PASS/FAIL lines")
    _common(check)
    return parser


def _resolve_config(arg: str) -> ExperimentConfig:
    if Path(arg).is_file():
        return load_config(arg)
    if arg in REGISTRY:
        return default_config(arg)
    raise FreegradError(f"{arg!r} is neither a config file nor a registered experiment (see 'freegrad list')")


def cmd_list() -> int:
    width = max(len(n) for n in REGISTRY)
    for name in sorted(REGISTRY):
        print(f"{name:<{width}}  {REGISTRY[name].description}")
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args.config)
    over = {}
    if args.seed:
        over["seeds"] = list(args.seed)
    if args.out_dir:
        over["out_dir"] = args.out_dir
    if args.subset:
        over["train_subset"] = args.subset
    if args.epochs is not None:
        over["epochs"] = args.epochs
    cfg = cfg.with_overrides(**over)
    outcome = run_experiment(cfg)
    for run in outcome.runs:
        print(f"{cfg.name} seed {run.seed}:")
        for key, value in sorted(run.summary.items()):
            print(f"  {key} = {value:.6g}")
    for path in outcome.artifacts:
        print(f"wrote {path}")
    return 0


def cmd_check(args: argparse.Namespace) -> int:
    numbers = resolve_suite(args.suite)
    opts = SuiteOptions(seed=args.seed[0] if args.seed else 0, out_dir=args.out_dir or "runs/acceptance",
                        train_subset=args.subset or 0)
    results = run_suite(numbers, opts, verbose=not args.quiet)
    return 0 if all(r.passed for r in results) else 1


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "list":
            return cmd_list()
        if args.command == "run":
            return cmd_run(args)
        return cmd_check(args)
    except (FreegradError, ValueError, FileNotFoundError) as err:
        print(f"freegrad: error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``pppad <command> [options]``.

Exit status is 0 on success, 1 for usage or configuration errors, 2 for
runtime failures and 3 when the gradient check finds an op above tolerance.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import experiment
from .io import ConfigError, ExperimentConfig, FormatError, atomic_write_text
from .segnet import TrainingDiverged

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_GRADCHECK = 0, 1, 2, 3

logger = logging.getLogger("pppad")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; usage errors here exit with 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _global_flags(parser: argparse.ArgumentParser, suppress: bool):
    default = (lambda value: argparse.SUPPRESS) if suppress else (lambda value: value)
    parser.add_argument("--config", type=Path, default=default(None), help="key = value config file")
    parser.add_argument("--seed", type=int, default=default(None), help="overrides the config seed")
    parser.add_argument("--deterministic", action="store_true", default=default(False),
                        help="accepted for compatibility; every command is already deterministic")
    parser.add_argument("--out", type=Path, default=default(Path("runs")), help="output directory")
    parser.add_argument("--theta", type=float, default=default(None), help="disagreement threshold (eval.theta)")
    parser.add_argument("--set", action="append", default=default([]), metavar="KEY=VALUE",
                        help="override one config key; repeatable")
    parser.add_argument("-v", "--verbose", action="store_true", default=default(False))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pppad", description="Padding experiments on a synthetic segmentation task.")
    _global_flags(parser, suppress=False)
    shared = _Parser(add_help=False)
    _global_flags(shared, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("gen-data", parents=[shared], help="write the synthetic train and eval splits")

    train = sub.add_parser("train", parents=[shared], help="zero-padding pretraining, then one run per mode")
    train.add_argument("--modes", help="comma-separated padding modes (pad.mode)")

    ev = sub.add_parser("eval", parents=[shared], help="invariance and accuracy report per mode")
    ev.add_argument("--modes", help="comma-separated padding modes (pad.mode)")
    ev.add_argument("--oracle", choices=("sliding", "cyclic"), help="eval.oracle")

    gc = sub.add_parser("gradcheck", parents=[shared], help="finite-difference check of every adjoint")
    gc.add_argument("--instances", type=int, default=20)

    bench = sub.add_parser("bench", parents=[shared], help="training and inference timings per mode")
    bench.add_argument("--modes", help="comma-separated padding modes (pad.mode)")

    params = sub.add_parser("params", parents=[shared], help="shared versus naive predictor sizes")
    params.add_argument("--h-p", type=int, default=2)
    params.add_argument("--w-p", type=int, default=3)
    params.add_argument("--n", type=int, default=8)
    params.add_argument("--channels", default="1,3,64", help="comma-separated channel counts")
    return parser


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig.default()
    pairs = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        pairs[key.strip()] = value
    if args.seed is not None:
        pairs["seed"] = args.seed
    if args.theta is not None:
        if args.theta < 0:
            raise ConfigError(f"--theta must be >= 0, got {args.theta}")
        pairs["eval.theta"] = args.theta
    if getattr(args, "modes", None):
        pairs["pad.mode"] = args.modes
    if getattr(args, "oracle", None):
        pairs["eval.oracle"] = args.oracle
    return cfg.override(**pairs)


def _cmd_gen_data(cfg, args) -> int:
    directory = experiment.data_dir_of(cfg, args.out)
    experiment.gen_data(cfg, directory)
    print(f"wrote train/eval splits to {directory}")
    return EXIT_OK


def _cmd_train(cfg, args) -> int:
    runs = experiment.run_training(cfg, args.out)
    print(f"{'mode':<14} {'phase1 first':>12} {'phase1 last':>12} {'phase2 first':>12} {'phase2 last':>12}")
    for run in runs.values():
        p1, p2 = run.phase1, run.phase2
        cells = [p1[0].loss if p1 else float("nan"), p1[-1].loss if p1 else float("nan"),
                 p2[0].loss if p2 else float("nan"), p2[-1].loss if p2 else float("nan")]
        print(f"{run.mode.label:<14} " + " ".join(f"{c:12.5f}" for c in cells))
    return EXIT_OK


def _cmd_eval(cfg, args) -> int:
    results = experiment.run_eval(cfg, args.out)
    print(experiment.comparison_csv(results), end="")
    return EXIT_OK


def _cmd_gradcheck(cfg, args) -> int:
    if args.instances < 1:
        raise ConfigError("--instances must be positive")
    errors = experiment.run_gradcheck(cfg["seed"], args.instances)
    print(experiment.gradcheck_table(errors))
    failed = [name for name, err in errors.items() if not err < experiment.GRADCHECK_TOLERANCE]
    return EXIT_GRADCHECK if failed else EXIT_OK


def _cmd_bench(cfg, args) -> int:
    rows = experiment.run_bench(cfg, args.out)
    print(experiment.bench_csv(rows), end="")
    return EXIT_OK


def _cmd_params(cfg, args) -> int:
    try:
        channels = [int(c) for c in args.channels.split(",") if c.strip()]
    except ValueError:
        raise ConfigError(f"--channels must be integers, got {args.channels!r}") from None
    rows = experiment.params_table(args.h_p, args.w_p, args.n, channels)
    print(f"{'C':>5} {'shared':>8} {'naive':>8} {'savings':>8}  7n(C-1)")
    for row in rows:
        check = {True: "ok", False: "MISMATCH"}.get(row.get("identity_ok"), "n/a")
        print(f"{row['C']:>5} {row['shared']:>8} {row['naive']:>8} {row['savings']:>8}  {check}")
    return EXIT_OK if all(row.get("identity_ok", True) for row in rows) else EXIT_RUNTIME


COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "bench": _cmd_bench,
    "params": _cmd_params,
}


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        experiment.validate(cfg)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        if args.command in ("gen-data", "train"):
            atomic_write_text(args.out / "config.txt", cfg.dumps())
        code = COMMANDS[args.command](cfg, args)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE if isinstance(exc, ConfigError) else EXIT_RUNTIME
    except (OSError, FormatError, TrainingDiverged, RuntimeError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

"""Command-line entry point: ``sors run``, ``sors verify`` and ``sors smooth``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import CapacityError, ConfigError, ContractViolation, UnsupportedError
from .harness import parse_config, run_experiment, smooth_csv
from .mdp import parse_mdp_text
from .verifier import TheoremViolation, verify_theorem

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2

log = logging.getLogger("sors")


def _cmd_run(args) -> int:
    config = parse_config(args.config)
    out = Path(args.out) if args.out else Path(args.config).parent / "results"
    result = run_experiment(config, out)
    sys.stdout.write(result.summary())
    log.info("wrote %d files to %s", len(result.files), out)
    return EXIT_OK


def _cmd_verify(args) -> int:
    path = Path(args.mdp)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read MDP file {path}: {exc}") from None
    mdp, rewards = parse_mdp_text(text)
    if "R1" not in rewards or "R2" not in rewards:
        raise ConfigError("the MDP file must define both R1 and R2")
    report = verify_theorem(mdp, rewards["R1"], rewards["R2"], args.horizon)
    print(report.format())
    return EXIT_OK


def _cmd_smooth(args) -> int:
    path = Path(getattr(args, "in"))
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    try:
        sys.stdout.write(smooth_csv(text, args.half_life))
    except ContractViolation as exc:
        raise ConfigError(str(exc)) from None
    return EXIT_OK


def _positive_int(raw: str) -> int:
    value = int(raw)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def _positive_float(raw: str) -> float:
    value = float(raw)
    if not value > 0:
        raise argparse.ArgumentTypeError("must be positive")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sors", description="Self-supervised online reward shaping experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a seeded experiment from a config file")
    p.add_argument("--config", required=True, help="flat key = value config file")
    p.add_argument("--out", help="output directory (default: results/ next to the config)")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("verify", help="check order equivalence of R1 and R2 on a small MDP")
    p.add_argument("--mdp", required=True, help="MDP text file with T, R1 and R2 lines")
    p.add_argument("--horizon", required=True, type=_positive_int)
    p.set_defaults(func=_cmd_verify)

    p = sub.add_parser("smooth", help="recompute the EMA column of a curve CSV")
    p.add_argument("--in", required=True, help="CSV with step and raw_return (or value) columns")
    p.add_argument("--half-life", required=True, type=_positive_float)
    p.set_defaults(func=_cmd_smooth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on usage errors; those are configuration errors here.
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (UnsupportedError, CapacityError, TheoremViolation) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # any other failure during a run
        log.debug("traceback", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

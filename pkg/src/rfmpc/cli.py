"""Command-line entry point: ``rfmpc <experiment> [options]``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .sim import (
    EXPERIMENTS,
    ConfigError,
    ControllerError,
    IoError,
    emit_report,
    load_config,
    load_presets,
    run_study,
)

log = logging.getLogger("rfmpc")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rfmpc", description="Run closed-loop SRB quadruped experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="experiment", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--preset", help=f"preset name (default: {name})")
        p.add_argument("--config", type=Path, help="YAML preset file (default: bundled presets)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path, help="existing output directory for CSV logs and summary")
        p.add_argument("--scheme", choices=("op", "ref"), help="linearization scheme")
        p.add_argument("--duration", type=float, help="simulated time in seconds")
    sub.add_parser("list", help="list available presets")
    return parser


def main(argv=None) -> int:
    """Returns 0 when every check of the study passes, 1 when one fails, 2 on errors."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.experiment == "list":
            for name, d in load_presets().items():
                print(f"{name:24s} {d.get('experiment', '?')}")
            return 0
        preset = args.preset or args.experiment
        cfg = load_config(preset, args.config, seed=args.seed, scheme=args.scheme, duration=args.duration)
        if cfg.experiment != args.experiment:
            raise ConfigError(f"preset {preset!r} is a {cfg.experiment} experiment, not {args.experiment}")
        out = args.out if args.out is not None else cfg.out
        if out is None:
            out = Path("rfmpc_runs")
            out.mkdir(exist_ok=True)
        cfg = replace(cfg, out=out)
        if not Path(out).is_dir():
            raise IoError(f"output directory {out} does not exist")
        result = run_study(cfg)
        emit_report(result, cfg)
    except (ConfigError, IoError, ControllerError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for key, check in result.checks.items():
        print(f"{'PASS' if check.passed else 'FAIL'}  {key}: {check.describe()}")
    print(f"{result.name}: {'PASS' if result.passed else 'FAIL'} ({result.wall_time:.1f} s), output in {out}")
    return 0 if result.passed else 1


if __name__ == "__main__":
    sys.exit(main())

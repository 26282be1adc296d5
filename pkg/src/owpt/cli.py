"""Command-line entry point.

Verbs: ``run`` (train + evaluate all methods), ``theorem`` (bound checks),
``sweep-gamma`` (detector-margin sweep), ``roc`` (curve exports),
``gen-data`` (dataset exports).  Exit codes: 0 ok, 2 config error,
3 training divergence, 4 invalid/failed theorem report.
"""

from __future__ import annotations

import argparse
import sys

from .config import ConfigError, parse_config
from .experiment import (
    GAMMA_SWEEP_DEFAULT,
    cmd_gen_data,
    cmd_roc,
    cmd_run,
    cmd_sweep_gamma,
    cmd_theorem,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_THEOREM = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="owpt",
        description="Open-world prompt tuning experiments on a synthetic frozen encoder",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("run", "train and evaluate the configured methods; write results.csv"),
        ("theorem", "verify the routing error bounds per seed"),
        ("sweep-gamma", "retrain detectors across margin values"),
        ("roc", "export ROC curves for the detection scores"),
        ("gen-data", "export the synthetic datasets as text"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="path to a key=value config file")
        if name == "sweep-gamma":
            p.add_argument(
                "--gammas",
                default=",".join(str(g) for g in GAMMA_SWEEP_DEFAULT),
                help="comma-separated margin values",
            )
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config)
    except ConfigError as exc:
        print(f"config error [{exc.key}]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if args.command == "run":
            out = cmd_run(cfg)
            print(f"wrote {out / 'results.csv'}")
        elif args.command == "theorem":
            out, all_hold, all_valid = cmd_theorem(cfg)
            print(f"wrote theorem reports to {out}")
            if not (all_hold and all_valid):
                print("theorem check failed", file=sys.stderr)
                return EXIT_THEOREM
        elif args.command == "sweep-gamma":
            try:
                gammas = tuple(float(g) for g in args.gammas.split(",") if g.strip())
            except ValueError:
                print(f"config error [gammas]: bad value {args.gammas!r}", file=sys.stderr)
                return EXIT_CONFIG
            out = cmd_sweep_gamma(cfg, gammas)
            print(f"wrote {out / 'sweep_gamma.csv'}")
        elif args.command == "roc":
            out = cmd_roc(cfg)
            print(f"wrote ROC exports to {out}")
        elif args.command == "gen-data":
            out = cmd_gen_data(cfg)
            print(f"wrote dataset exports to {out}")
    except RuntimeError as exc:
        if "diverged" in str(exc):
            print(f"training diverged: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
        raise
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

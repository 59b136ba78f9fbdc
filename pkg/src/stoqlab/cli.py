"""
Command line: ``stoqlab <scenario> --config <file> [--fast] [--out <dir>]``.

The config file is optional for ``verify``; the scenario named on the
command line must agree with the file's ``scenario`` key when both are
given. ``STOQLAB_THREADS`` caps the worker count (0 = one per CPU).
"""
from __future__ import annotations

import argparse
import sys
from typing import Optional, Sequence

from .config import SCENARIOS, ConfigError, default_config, parse_config
from .scenarios import EXIT_INTERNAL, EXIT_INVALID, run_scenario


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="stoqlab",
        description="Stochastic quantum mechanics / stochastic electrodynamics laboratory.")
    ap.add_argument("scenario", choices=SCENARIOS)
    ap.add_argument("--config", help="flat dotted-key config file")
    ap.add_argument("--fast", action="store_true",
                    help="10x smaller ensembles, sqrt(10)x wider statistical tolerances")
    ap.add_argument("--out", help="output directory (overrides output_dir)")
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.config is None:
            cfg = default_config(args.scenario)
        else:
            with open(args.config) as fh:
                text = fh.read()
            if "scenario" not in {ln.split("=", 1)[0].strip() for ln in text.splitlines()}:
                text = f"scenario = {args.scenario}\n" + text
            cfg = parse_config(text)
            if cfg.scenario != args.scenario:
                raise ConfigError([f"config scenario {cfg.scenario!r} does not match "
                                   f"command-line scenario {args.scenario!r}"])
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        code = run_scenario(cfg, args.out, fast=args.fast)
    except Exception as exc:  # pragma: no cover - run_scenario reports its own errors
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    out = args.out or cfg.output_dir
    print(f"{cfg.scenario}: exit {code}; manifest at {out}/manifest.json")
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

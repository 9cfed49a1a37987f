"""Command-line entry point: ``jacdep run|validate|oracle|version``."""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from . import __version__
from .errors import ConfigError, IoError, JacdepError
from .harness import config_echo, effective_workers, medians, parse_config, run_campaign, write_results

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _load(path):
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"no such config file: {path}")
    return parse_config(p)


def cmd_run(args) -> int:
    cc = _load(args.config)
    if args.output_dir:
        cc = dataclasses.replace(cc, output_dir=args.output_dir)
    if args.workers:
        cc = dataclasses.replace(cc, workers=args.workers)
    res = run_campaign(cc)
    out = write_results(res, cc.output_dir)
    for (alg, m), (med, n) in medians(res).items():
        print(f"{alg:>10s} median {m:<4s} = {'absent' if med is None else f'{med:.4g}'} over {n} (UPP, UE) pairs")
    print(f"wrote {out} in {res.wall_clock_s['total']:.1f} s with {res.wall_clock_s['workers']} worker(s)",
          file=sys.stderr)
    return EXIT_OK


def cmd_validate(args) -> int:
    cc = _load(args.config)
    print(config_echo(cc), end="")
    print(f"n_trials = {cc.n_upp * cc.n_realizations}, workers = {effective_workers(cc)}")
    return EXIT_OK


def cmd_oracle(args) -> int:
    from .checks import CHECKS, SUITES

    if args.suite == "all":
        numbers = sorted(CHECKS)
    elif args.suite in SUITES:
        numbers = [SUITES[args.suite]]
    elif args.suite.isdigit() and int(args.suite) in CHECKS:
        numbers = [int(args.suite)]
    else:
        print(f"unknown suite {args.suite!r}; choose from all, {', '.join(SUITES)} or 1-9", file=sys.stderr)
        return EXIT_CONFIG
    failed = 0
    for n in numbers:
        res = CHECKS[n]()
        print(res.line(), flush=True)
        failed += not res.passed
    return EXIT_RUNTIME if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="jacdep", description="Grant-free cell-free uplink receiver simulator.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a Monte Carlo campaign and write CSV results")
    p.add_argument("config", help="config file with 'key = value' lines")
    p.add_argument("-o", "--output-dir", help="override output_dir from the config")
    p.add_argument("-j", "--workers", type=int, help="worker processes (JACDEP_WORKERS takes precedence)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("validate", help="parse a config file and echo the effective settings")
    p.add_argument("config")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("oracle", help="run acceptance oracles: all, a suite name or a criterion number")
    p.add_argument("suite")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("version", help="print the package version")
    p.set_defaults(func=lambda args: print(__version__) or EXIT_OK)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on bad usage, 0 on --help
        return int(e.code or 0)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (JacdepError, IoError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

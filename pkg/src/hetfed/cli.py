"""Command line: ``hetfed run | report | selftest``."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .config import METHODS, ConfigValidationError, load_config
from .runner import aggregate, format_report, run_matrix, write_report
from .selftest import run_selftest


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hetfed", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run every cell of a config file")
    run.add_argument("--config", required=True, type=Path)
    run.add_argument("--seed", type=int, action="append",
                     help="override the seed list (repeatable)")
    run.add_argument("--method", choices=METHODS, help="override the method")
    run.add_argument("--out", type=Path, help="output directory (default: config out_dir)")
    rep = sub.add_parser("report", help="aggregate finished cells")
    rep.add_argument("--in", dest="in_dir", required=True, type=Path)
    sub.add_parser("selftest", help="quick invariant checks")
    return ap


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    overrides = {}
    if args.seed:
        overrides.update(seeds=list(args.seed), seed=args.seed[0])
    if args.method:
        overrides["method"] = args.method
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    out = args.out or Path(cfg.out_dir)
    code = run_matrix(cfg.cells(), out)
    print(format_report(aggregate(out)))
    return code


def _cmd_report(args) -> int:
    if not args.in_dir.is_dir():
        print(f"no such directory: {args.in_dir}", file=sys.stderr)
        return 2
    rows = aggregate(args.in_dir)
    write_report(rows, args.in_dir / "report.csv")
    print(format_report(rows))
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "report":
            return _cmd_report(args)
        return run_selftest()
    except (ConfigValidationError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

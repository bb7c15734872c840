"""Command-line entry point: ``lvse run | compare | validate``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .evaluation import ComparisonError, compare_variants, load_report, write_comparison
from .grid import GridError, load_grid
from .runner import DUMP_KINDS, ConfigError, load_config, run_scenario

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2


def _run(args) -> int:
    try:
        config = load_config(
            args.config,
            out_dir=str(Path(args.out).resolve()) if args.out else None,
            workers=args.workers,
            dumps=tuple(args.dump) if args.dump else None,
        )
        artifacts = run_scenario(config)
    except (ConfigError, GridError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for name, report in artifacts.quality.items():
        verdicts = " ".join(f"{k}={'pass' if ok else 'FAIL'}" for k, ok in report.verdicts.items())
        print(f"variant {name}: q99(V)={report.q99_voltage:.4%} q95(I)={report.q95_loading:.4%} {verdicts}")
    for name, err in artifacts.failed.items():
        print(f"variant {name}: FAILED {err}", file=sys.stderr)
    print(f"results in {artifacts.out_dir}")
    return EXIT_OK if artifacts.ok else EXIT_PARTIAL


def _compare(args) -> int:
    try:
        table = compare_variants([load_report(p) for p in args.reports])
    except (ComparisonError, OSError, ValueError, KeyError) as exc:
        print(f"compare error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    csv_path, _ = write_comparison(table, args.out)
    cols = list(table[0])
    print(",".join(cols))
    for row in table:
        print(",".join(str(row[c]) for c in cols))
    print(f"written {csv_path}")
    return EXIT_OK


def _validate(args) -> int:
    try:
        grid = load_grid(args.grid)
    except (GridError, OSError) as exc:
        print(f"invalid grid: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"{grid.name}: {len(grid.buses)} buses, {len(grid.lines)} lines, {len(grid.cabinets)} cabinets, "
          f"{len(grid.prosumers)} prosumers, {len(grid.feeders)} feeders, {grid.profiles.length} profile steps")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lvse", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a scenario config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--workers", type=int, help="parallel timestep workers")
    p.add_argument("--dump", action="append", choices=DUMP_KINDS, help="extra per-timestep dumps (repeatable)")
    p.set_defaults(func=_run)

    p = sub.add_parser("compare", help="tabulate several report.json files")
    p.add_argument("--reports", nargs="+", required=True)
    p.add_argument("--out", default=".", help="directory for comparison.csv / comparison.json")
    p.set_defaults(func=_compare)

    p = sub.add_parser("validate", help="load and validate a grid directory")
    p.add_argument("--grid", required=True)
    p.set_defaults(func=_validate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

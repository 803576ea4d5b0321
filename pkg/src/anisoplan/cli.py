"""Command line entry point: ``anisoplan plan|batch|print-defaults``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .pipeline import EXIT_PARSE, MODES, ScenarioError, default_out_dir, format_record


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anisoplan", description="Anisotropic kinodynamic planning pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="run one scenario")
    p.add_argument("scenario", help="scenario TOML file, or the name of a bundled scenario")
    p.add_argument("--mode", choices=MODES, help="override the scenario mode")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    p.add_argument("--out", type=Path, help=f"output directory (default ${pipeline.OUT_ENV} or ./anisoplan_out)")
    p.add_argument("--replan", type=float, metavar="MS", help="re-plan from the simulated state every MS milliseconds")
    p.add_argument("--plot", action="store_true", help="write an SVG of the path over the map")
    p.add_argument("--verbose", action="store_true", help="stream optimizer telemetry to stderr")

    b = sub.add_parser("batch", help="run every scenario in a directory for several seeds")
    b.add_argument("directory", type=Path)
    b.add_argument("--seeds", type=_seeds, default=[0], help="comma-separated seeds, e.g. 0,1,2")
    b.add_argument("--modes", help="comma-separated modes (default: each scenario's own mode)")
    b.add_argument("--out", type=Path)

    sub.add_parser("print-defaults", help="print a scenario template with every default value")
    return parser


def _cmd_plan(args) -> int:
    try:
        scenario = pipeline.load_scenario(args.scenario).with_overrides(mode=args.mode, seed=args.seed)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    on_record = None
    if args.verbose:
        def on_record(rec):
            print(format_record(rec), file=sys.stderr)
    out = args.out or default_out_dir()
    result = pipeline.run(scenario, out, replan_ms=args.replan, plot=args.plot, on_record=on_record)
    print(format_record(result.record()))
    if result.message:
        print(f"error: {result.message}", file=sys.stderr)
    return result.exit_code


def _cmd_batch(args) -> int:
    modes = None
    if args.modes:
        modes = [m.strip() for m in args.modes.split(",")]
        bad = [m for m in modes if m not in MODES]
        if bad:
            print(f"error: unknown mode(s) {', '.join(bad)}", file=sys.stderr)
            return EXIT_PARSE
    try:
        report = pipeline.batch(args.directory, args.seeds, modes, args.out or default_out_dir())
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    print(json.dumps(report["summary"], sort_keys=True, indent=2))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "plan":
        return _cmd_plan(args)
    if args.command == "batch":
        return _cmd_batch(args)
    print(pipeline.defaults_toml())
    return 0


if __name__ == "__main__":
    sys.exit(main())

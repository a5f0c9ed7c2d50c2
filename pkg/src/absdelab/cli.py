"""Command line entry point: ``absdelab run <config>`` and ``absdelab list-scenarios``."""
from __future__ import annotations

import argparse
import sys

from . import runner, scenarios


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="absdelab", description="Regression Monte Carlo runs for anticipated BSDEs.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config", help="YAML experiment config")
    r.add_argument("--seed", type=int, help="override monte_carlo.seed")
    r.add_argument("--paths", type=int, help="override monte_carlo.n_paths")
    r.add_argument("--out", help="output directory (overrides output.dir)")
    r.add_argument("--check", nargs="+", metavar="NAME", help="checks to run (overrides config)")
    r.add_argument("--quiet", action="store_true", help="do not print the results table")
    sub.add_parser("list-scenarios", help="list built-in scenarios")
    return p


def _apply_overrides(raw: dict, args) -> dict:
    raw = dict(raw)
    mc = dict(raw.get("monte_carlo", {}))
    if args.seed is not None:
        mc["seed"] = args.seed
    if args.paths is not None:
        mc["n_paths"] = args.paths
    if mc:
        raw["monte_carlo"] = mc
    if args.check:
        raw["checks"] = list(args.check)
    if args.out:
        raw["output"] = {**raw.get("output", {}), "dir": args.out}
    return raw


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "list-scenarios":
        width = max(len(n) for n, _ in scenarios.list_scenarios())
        for name, desc in scenarios.list_scenarios():
            print(f"{name:<{width}}  {desc}")
        return 0
    try:
        raw = runner.load_config(args.config)
        if isinstance(raw, dict):
            raw = _apply_overrides(raw, args)
        cfg = runner.resolve_config(raw)
        result = runner.run_config(cfg)
    except runner.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return runner.EXIT_CONFIG
    if result.exit_code == runner.EXIT_NONCONV:
        print(f"non-convergence: {result.message}", file=sys.stderr)
        print(f"trace written to {result.out_dir / 'trace.json'}", file=sys.stderr)
        return result.exit_code
    if result.message:
        print(result.message, file=sys.stderr)
    if not args.quiet:
        sys.stdout.write(runner.results_csv(result.rows))
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())

"""Command line: ``aerolte run <scenario> --out <dir> [options]``.

Exit codes: 0 success, 2 invalid scenario or arguments, 3 simulation
refused the scenario, 4 an oracle cross-check disagreed.  Errors are
printed to stderr as one JSON object.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .backhaul import PLANNABLE_TECHS
from .metrics import clean, write_metrics
from .scenario import COUPLINGS, ScenarioError, demo_text, load_scenario, parse_scenario, revalidated
from .sim import SimulationError, run_scenario

EXIT_OK, EXIT_INVALID, EXIT_SIMULATION, EXIT_ORACLE = 0, 2, 3, 4
DEMO = "demo"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _fail(EXIT_INVALID, {"error": "invalid_arguments", "message": message})


def _fail(code: int, payload: dict):
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    raise SystemExit(code)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="aerolte", description="Deterministic UAV LTE network simulator.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    run = sub.add_parser("run", help="run a scenario and write metrics")
    run.add_argument("scenario", help=f"scenario YAML file, or '{DEMO}' for the bundled demo")
    run.add_argument("--out", required=True, type=Path, help="output directory")
    run.add_argument("--seed", type=int)
    run.add_argument("--duration", type=float, help="service duration in seconds")
    run.add_argument("--tech", choices=PLANNABLE_TECHS)
    run.add_argument("--coupling", choices=COUPLINGS)
    run.add_argument("--verify-oracles", action="store_true",
                     help="cross-check the run against brute-force oracles; writes oracle_report.json")
    return p


def _scenario(args):
    if args.scenario == DEMO and not Path(DEMO).exists():
        base = parse_scenario(demo_text())
    else:
        base = load_scenario(args.scenario)
    if (args.seed, args.duration, args.tech, args.coupling) == (None, None, None, None):
        return base
    return revalidated(base.with_overrides(seed=args.seed, duration_s=args.duration, tech=args.tech,
                                           coupling=args.coupling))


def cmd_run(args) -> int:
    try:
        scenario = _scenario(args)
    except ScenarioError as exc:
        _fail(EXIT_INVALID, exc.to_dict())
    try:
        sim, report = run_scenario(scenario)
    except SimulationError as exc:
        _fail(EXIT_SIMULATION, exc.to_dict())
    problems = report.check()
    if problems:
        _fail(EXIT_SIMULATION, {"error": "metrics_invariant", "details": problems})
    write_metrics(report, args.out)
    s = report.summary
    print(f"{scenario.name}: seed {scenario.seed}, {s['tech']}/{s['coupling']}, "
          f"lambda {s['backhaul']['lambda_final']}, packets {s['packets']['delivered']}/{s['packets']['sent']} "
          f"delivered -> {args.out}")
    if args.verify_oracles:
        from .verify import verify_run
        result = verify_run(sim)
        (args.out / "oracle_report.json").write_text(json.dumps(clean(result), sort_keys=True, indent=2) + "\n",
                                                     encoding="utf-8")
        for c in result["checks"]:
            print(f"oracle {c['name']}: {'pass' if c['passed'] else 'FAIL'} "
                  f"({c['compared']} compared, {c['skipped']} skipped)")
        if not result["passed"]:
            _fail(EXIT_ORACLE, {"error": "oracle_mismatch",
                                "checks": [c for c in result["checks"] if not c["passed"]]})
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return cmd_run(args)
    return EXIT_INVALID


if __name__ == "__main__":
    raise SystemExit(main())

"""Command-line entry point: ``pfcharge {run,sweep,scenario,check}``.

Errors exit nonzero and print a JSON object ``{"error": ..., "type": ...}``
on stderr.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, config_to_dict, load_scenario
from .network import NetworkError, load_network
from .report import export, load_sweep, sweep
from .simulator import SimulationError, check_invariants, run, scenario_heterogeneous_aggressive, write_outputs
from .verify import verify_network

SCENARIOS = {f"star-heterogeneous-aggressive-{s.lower()}": s for s in ("UT", "UC", "AF", "AFT")}

EXIT_FAILURE = 1   # run aborted or checks failed
EXIT_USAGE = 2     # bad input files or arguments


class CheckFailed(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(json.dumps({"error": message, "type": "UsageError"}), file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _clean(obj):
    # strict JSON: NaN and infinities become null
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def _overrides(config, args):
    changes = {k: getattr(args, k) for k in ("dt", "tol", "horizon") if getattr(args, k, None) is not None}
    return replace(config, **changes) if changes else config


def cmd_run(args) -> dict:
    config = _overrides(load_scenario(args.scenario), args)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    trace = run(config)
    violations = check_invariants(trace, config)
    out = {"summary": trace.summary(), "violations": len(violations)}
    if args.out:
        out["files"] = write_outputs(trace, args.out, config, {"scenario": str(args.scenario)})
    if violations:
        raise CheckFailed(f"{len(violations)} invariant violations, first: {violations[0]}")
    return out


def cmd_sweep(args) -> dict:
    spec = load_sweep(args.sweep)
    base = _overrides(spec.base, args)
    if base is not spec.base:
        spec = replace(spec, base=base)
    summary = sweep(spec, jobs=args.jobs)
    out = {"runs": sum(r.runs for r in summary.rows), "failed": len(summary.failures),
           "violations": len(summary.violations), "rows": summary.table()}
    if args.out:
        d = Path(args.out)
        d.mkdir(parents=True, exist_ok=True)
        out["files"] = {fmt: str(export(summary, fmt, d / f"summary.{fmt}")) for fmt in ("csv", "json")}
    return out


def cmd_scenario(args) -> dict | None:
    if args.name not in SCENARIOS:
        raise ConfigError(f"unknown scenario {args.name!r}; choose from {sorted(SCENARIOS)}")
    config = _overrides(scenario_heterogeneous_aggressive(SCENARIOS[args.name]), args)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    text = json.dumps(config_to_dict(config), indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        return {"scenario": args.name, "file": args.out}
    sys.stdout.write(text)
    return None


def cmd_check(args) -> dict:
    net = load_network(args.network)
    reports = verify_network(net, tol=args.tol or 1e-8, seed=args.seed or 0)
    out = {"network": str(args.network), "cases": [r.to_dict() for r in reports],
           "passed": all(r.passed for r in reports)}
    if not out["passed"]:
        print(json.dumps(_clean(out), indent=2, default=str))
        raise CheckFailed(f"{sum(not r.passed for r in reports)} of {len(reports)} checks failed")
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pfcharge", description="EV charging on radial grids with "
                                     "proportionally fair power-flow allocation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def overrides(p):
        p.add_argument("--dt", type=float, help="step length override")
        p.add_argument("--tol", type=float, help="solver tolerance override")
        p.add_argument("--horizon", type=float, help="simulated time override")

    p = sub.add_parser("run", help="simulate one scenario file")
    p.add_argument("scenario")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="directory for trace.csv, departures.csv and summary.json")
    overrides(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="replicated arrival-rate sweep")
    p.add_argument("sweep")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", help="directory for summary.csv and summary.json")
    overrides(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("scenario", help="emit a built-in scenario file")
    p.add_argument("name", choices=sorted(SCENARIOS))
    p.add_argument("--out", help="file to write instead of stdout")
    p.add_argument("--seed", type=int)
    overrides(p)
    p.set_defaults(func=cmd_scenario)

    p = sub.add_parser("check", help="oracle and KKT verification on a network file")
    p.add_argument("network")
    p.add_argument("--seed", type=int)
    p.add_argument("--tol", type=float)
    p.set_defaults(func=cmd_check)
    return parser


def _fail(exc: Exception, code: int) -> int:
    doc = {"error": str(exc), "type": type(exc).__name__}
    if isinstance(exc, SimulationError):
        doc.update(exc.to_dict())
    print(json.dumps(_clean(doc), default=str), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        out = args.func(args)
    except (ConfigError, NetworkError, OSError) as exc:
        return _fail(exc, EXIT_USAGE)
    except (SimulationError, CheckFailed) as exc:
        return _fail(exc, EXIT_FAILURE)
    except ValueError as exc:
        return _fail(exc, EXIT_USAGE)
    if out is not None:
        print(json.dumps(_clean(out), indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command line front end.

Exit codes: 0 success, 2 scenario/config error, 3 case parse error,
4 power-flow non-convergence in a distribution run.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .attack_cascade import CascadePolicy, cascade, trace_to_dict
from .grid_model import CaseSemanticError, CaseSyntaxError, load_buses, load_case, scale_loads
from .powerflow import ConvergenceError, SolveOptions
from .scenario import (
    OUTPUT_DIR_ENV,
    PLOT_TAGS,
    CaseError,
    ConfigError,
    RunReport,
    check_references,
    emit_plotdata,
    load_config,
    resolve_output_dir,
    run_scenario,
)

EXIT_OK, EXIT_CONFIG, EXIT_CASE, EXIT_NONCONVERGENCE = 0, 2, 3, 4


def _cmd_validate(args) -> int:
    cfg = load_config(args.config)
    net = check_references(cfg)
    print(f"{args.config}: ok ({cfg.mode}, case {cfg.case_path}, {net.n_bus} buses)")
    return EXIT_OK


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    report = run_scenario(cfg, output_dir=args.out)
    out = resolve_output_dir(cfg, args.out)
    print(f"scenario {report.name}: outputs in {out}")
    for key, value in report.summary.items():
        print(f"  {key}: {value}")
    return EXIT_OK


def _cmd_plotdata(args) -> int:
    try:
        report = RunReport.read(args.report)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read report {args.report}: {exc}") from None
    try:
        text = emit_plotdata(report, args.fig)
    except KeyError as exc:
        raise ConfigError(str(exc.args[0])) from None
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _cmd_cascade(args) -> int:
    net = load_case(args.case)
    if args.scale < 0:
        raise ConfigError("--scale must be non-negative")
    attacked = scale_loads(net, args.scale, load_buses(net), scale_q=not args.p_only)
    try:
        policy = CascadePolicy(
            rating_basis=args.rating_basis, margin=args.margin, dispatch=args.dispatch,
            strict_capacity=args.strict,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    trace = cascade(attacked, SolveOptions(enforce_q_limits=not args.no_q_limits), policy,
                    reference=net)
    if args.json:
        print(json.dumps(trace_to_dict(net, trace), indent=1, sort_keys=True))
        return EXIT_OK
    print(f"{net.name}: load x{args.scale} on {len(load_buses(net))} load buses, "
          f"ratings: {args.rating_basis}")
    for i, r in enumerate(trace.rounds, 1):
        names = ", ".join(
            f"{k + 1} ({net.external(net.branches[k].from_bus)}-"
            f"{net.external(net.branches[k].to_bus)})"
            for k in r.deactivated_branches
        )
        print(f"  round {i}: {names}")
    print(f"  deactivated: {len(trace.total_deactivated)}, islands: {len(trace.final_islands)}")
    dead = sorted(net.external(b) for b in trace.dead_buses)
    print(f"  dead buses: {dead}")
    print(f"  outage: {trace.outage_mw:.1f} MW "
          f"({100 * trace.outage_mw / net.total_load():.1f}% of the unscaled load)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="evbotnet",
        description="EV botnet load-altering attack simulator.",
        epilog=f"Set {OUTPUT_DIR_ENV} to override the output directory of 'run'.",
    )
    p.add_argument("-v", "--verbose", action="store_true", help="log solver warnings")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("run", help="run a scenario file (or a bundled scenario name)")
    s.add_argument("config")
    s.add_argument("--out", help="output directory (overrides the env var and the file)")
    s.set_defaults(func=_cmd_run)

    s = sub.add_parser("validate", help="check a scenario file without running it")
    s.add_argument("config")
    s.set_defaults(func=_cmd_validate)

    s = sub.add_parser("plotdata", help="emit plot-ready CSV from a JSON report")
    s.add_argument("report")
    s.add_argument("--fig", required=True, help=f"one of {', '.join(PLOT_TAGS)}")
    s.add_argument("-o", "--output", help="write to a file instead of stdout")
    s.set_defaults(func=_cmd_plotdata)

    s = sub.add_parser("cascade", help="uniform load increase and overload cascade")
    s.add_argument("case", help="bundled case name or path to a case file")
    s.add_argument("--scale", type=float, required=True, help="load factor, e.g. 1.05")
    s.add_argument("--rating-basis", choices=("case", "base_flow"), default="case")
    s.add_argument("--margin", type=float, default=0.93,
                   help="capacity margin over pre-attack flow for --rating-basis base_flow")
    s.add_argument("--dispatch", choices=("slack", "proportional", "islands_proportional"),
                   default="slack")
    s.add_argument("--strict", action="store_true", help="shed load beyond island capacity")
    s.add_argument("--p-only", action="store_true", help="scale active load only")
    s.add_argument("--no-q-limits", action="store_true")
    s.add_argument("--json", action="store_true", help="print the full trace as JSON")
    s.set_defaults(func=_cmd_cascade)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CaseError, CaseSyntaxError, CaseSemanticError) as exc:
        print(f"case error: {exc}", file=sys.stderr)
        return EXIT_CASE
    except FileNotFoundError as exc:
        print(f"case error: {exc}", file=sys.stderr)
        return EXIT_CASE
    except ConvergenceError as exc:
        print(f"non-convergence: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE


if __name__ == "__main__":
    sys.exit(main())

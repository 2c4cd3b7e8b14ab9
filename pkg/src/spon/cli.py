"""Command-line front end.

Three subcommands: `run` executes a measurement scenario and writes CSV
artifacts, `topo paths` prints node-disjoint routes for a topology file, and
`summarize` rebuilds summary tables from previously written raw CSVs.

Exit codes: 0 on success, 1 on usage errors, 2 when a scenario or input
fails at runtime.
"""

import argparse
import inspect
import sys
from typing import List, Optional

from .experiments import (SCENARIOS, ScenarioError, load_raw_reports,
                          make_scenario, run_scenario, summarize,
                          variant_name, write_summary)
from .topology import (NoPath, TopologyError, TopologyView, k_disjoint_paths,
                       load_topology)

USAGE_EXIT = 1
FAILURE_EXIT = 2


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad flags; the contract here reserves 2 for
    runtime failures, so usage problems exit 1 instead."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(USAGE_EXIT, f"{self.prog}: error: {message}\n")


def build_parser() -> _Parser:
    parser = _Parser(prog="spon", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a scenario and emit CSV artifacts")
    run_p.add_argument("--scenario", required=True, choices=sorted(SCENARIOS))
    run_p.add_argument("--service", choices=("pri", "rel"),
                       help="restrict to one overlay service (with --k)")
    run_p.add_argument("--k", type=int, choices=(0, 1, 2, 3),
                       help="path count; 0 floods (default 0 with --service)")
    run_p.add_argument("--loss", type=float, default=None,
                       help="loss percent on the scenario's lossy link")
    run_p.add_argument("--seed", type=int, default=1)
    run_p.add_argument("--reps", type=int, default=None)
    run_p.add_argument("--out", default=None,
                       help="directory for raw_<variant>.csv + summaries")
    run_p.add_argument("--payments", type=int, default=None)
    run_p.add_argument("--total", type=int, default=None,
                       help="drops per payment")
    run_p.add_argument("--packet", type=int, default=None,
                       help="drops per micro-payment")
    run_p.add_argument("--pings", type=int, default=None)

    topo_p = sub.add_parser("topo", help="topology queries")
    topo_sub = topo_p.add_subparsers(dest="topo_command", required=True)
    paths_p = topo_sub.add_parser("paths", help="print node-disjoint routes")
    paths_p.add_argument("--file", required=True)
    paths_p.add_argument("--src", required=True)
    paths_p.add_argument("--dst", required=True)
    paths_p.add_argument("--k", type=int, default=2)

    sum_p = sub.add_parser("summarize", help="recompute summaries from raw CSVs")
    sum_p.add_argument("--in", dest="in_dir", required=True)
    return parser


def _scenario_overrides(args: argparse.Namespace, parser: _Parser) -> dict:
    builder = SCENARIOS[args.scenario]
    accepted = set(inspect.signature(builder).parameters)
    requested = {
        "loss": args.loss,
        "reps": args.reps,
        "payments": args.payments,
        "total": args.total,
        "packet": args.packet,
        "pings": args.pings,
    }
    overrides = {"seed": args.seed}
    for key, value in requested.items():
        if value is None:
            continue
        if key not in accepted:
            parser.error(f"--{key} does not apply to {args.scenario}")
        overrides[key] = value
    if args.service is not None or args.k is not None:
        if args.scenario == "fairness":
            parser.error("--service/--k do not apply to fairness")
        service = args.service or "pri"
        variant = variant_name(service, args.k if args.k is not None else 0)
        variants = ["baseline", variant]
        if args.scenario == "chain-meltdown":
            variants.insert(1, "baseline-cut")
        overrides["variants"] = tuple(variants)
    return overrides


def _cmd_run(args: argparse.Namespace, parser: _Parser) -> int:
    overrides = _scenario_overrides(args, parser)
    try:
        scenario = make_scenario(args.scenario, **overrides)
        reports = run_scenario(scenario, out_dir=args.out)
        _, text = summarize(reports)
    except ScenarioError as exc:
        print(f"spon run: {exc}", file=sys.stderr)
        return FAILURE_EXIT
    except Exception as exc:
        print(f"spon run: scenario failed: {exc}", file=sys.stderr)
        return FAILURE_EXIT
    sys.stdout.write(text)
    if any(not r.settle_ok for r in reports):
        print("spon run: settlement check failed", file=sys.stderr)
        return FAILURE_EXIT
    return 0


def _cmd_topo_paths(args: argparse.Namespace) -> int:
    try:
        topo = load_topology(args.file)
        view = TopologyView.all_up(topo)
        paths = k_disjoint_paths(view, args.src, args.dst, args.k)
    except (OSError, TopologyError, NoPath, ValueError) as exc:
        print(f"spon topo paths: {exc}", file=sys.stderr)
        return FAILURE_EXIT
    for path in paths:
        hops = " -> ".join(path.hops)
        print(f"{hops}  ({path.total_latency_ms:.3f} ms)")
    return 0


def _cmd_summarize(args: argparse.Namespace) -> int:
    try:
        reports = load_raw_reports(args.in_dir)
        text = write_summary(reports, args.in_dir)
    except (OSError, ScenarioError, ValueError) as exc:
        print(f"spon summarize: {exc}", file=sys.stderr)
        return FAILURE_EXIT
    sys.stdout.write(text)
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "run":
        return _cmd_run(args, parser)
    if args.command == "topo":
        return _cmd_topo_paths(args)
    return _cmd_summarize(args)


if __name__ == "__main__":
    sys.exit(main())

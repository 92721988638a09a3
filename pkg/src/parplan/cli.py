"""Command-line front end: compile, verify and simulate plans."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml

from .commplan import family_table
from .compiler import InfeasibleSchedule, compile_plan, load_plan
from .errors import PlanError, UnsupportedOpError
from .graph import ClusterSpec, graph_document, load_graph
from .refexec import compare, random_inputs, run_plan, run_reference
from .simulate import ExecutionPlan, lower, simulate
from .strategies import StrategyConfig

EXIT_OK = 0
EXIT_INFEASIBLE = 2
EXIT_MISMATCH = 3
EXIT_INPUT = 4

log = logging.getLogger("parplan")


class InputError(Exception):
    pass


def _read_text(path: str) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None


def _read_json(path: str) -> Any:
    try:
        return json.loads(_read_text(path))
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON: {exc}") from None


def _read_yaml(path: str) -> Dict[str, Any]:
    try:
        doc = yaml.safe_load(_read_text(path))
    except yaml.YAMLError as exc:
        raise InputError(f"{path}: invalid YAML: {exc}") from None
    if not isinstance(doc, dict):
        raise InputError(f"{path}: expected a mapping")
    return doc


def _write_json(path: Path, doc: Any) -> None:
    path.write_text(json.dumps(doc, indent=1) + "\n")


def load_cluster(path: str) -> ClusterSpec:
    try:
        return ClusterSpec.from_dict(_read_yaml(path))
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{path}: malformed cluster document: {exc}") from None


def cmd_compile(args) -> int:
    doc = _read_json(args.graph)
    cluster = load_cluster(args.cluster)
    sdoc = _read_yaml(args.strategy)
    strategy = StrategyConfig.from_dict(sdoc)
    if args.seed is not None:
        strategy.params.setdefault("seed", args.seed)
    try:
        result = compile_plan(doc, cluster, strategy)
    except InfeasibleSchedule as exc:
        print("schedule is infeasible", file=sys.stderr)
        print(exc.report.render(), file=sys.stderr)
        return EXIT_INFEASIBLE
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "plan.json", result.document())
    g = result.graph
    kinds: Dict[str, int] = {}
    for op in g.ops.values():
        kinds[op.kind] = kinds.get(op.kind, 0) + 1
    print(f"plan: {out / 'plan.json'}")
    print(f"devices: {len(result.plan.lanes)}  ops: {len(g.ops)}  "
          + "  ".join(f"{k}={v}" for k, v in sorted(kinds.items())))
    for fid, pid, steps, naive, searched, replaced in family_table(g):
        if steps:
            tag = "replaced" if replaced else "kept naive"
            print(f"  {fid} {pid}: {steps} (naive {naive:.3g} s, searched {searched:.3g} s, {tag})")
    return EXIT_OK


def cmd_verify(args) -> int:
    plan_doc = _read_json(args.plan)
    graph_doc = _read_json(args.graph)
    source, g, _ = load_plan(plan_doc)
    given = load_graph(graph_doc)
    if graph_document(given) != graph_document(source):
        raise InputError(f"{args.graph} is not the graph this plan was compiled from")
    try:
        inputs = random_inputs(given, args.seed)
        ref = run_reference(given, inputs)
        got = run_plan(g, inputs)
    except UnsupportedOpError as exc:
        print(f"SKIP: {exc}")
        return EXIT_OK
    bad = compare(ref, got)
    if bad is None:
        print(f"PASS: {len(ref)} tensors match (seed {args.seed})")
        return EXIT_OK
    pid, index = bad
    detail = f"index {list(index)}" if index else "missing or misshapen"
    want = ref[pid][index] if index else None
    have = got[pid][index] if index and pid in got else None
    print(f"FAIL: tensor {pid} {detail}" + (f": expected {want}, got {have}" if index else ""))
    return EXIT_MISMATCH


def cmd_simulate(args) -> int:
    plan_doc = _read_json(args.plan)
    cluster = load_cluster(args.cluster)
    if "state" in plan_doc:
        _, g, _ = load_plan(plan_doc)
        plan = lower(g, cluster)
    else:
        plan = ExecutionPlan.from_dict(plan_doc.get("execution", plan_doc))
    report = simulate(plan)
    svg = Path(args.svg)
    svg.parent.mkdir(parents=True, exist_ok=True)
    report_path = Path(args.report) if args.report else svg.with_suffix(".json")
    csv_path = Path(args.csv) if args.csv else svg.with_suffix(".csv")
    _write_json(report_path, report.to_dict())
    csv_path.write_text(report.csv())
    from .plotting import gantt_svg
    gantt_svg(report, str(svg))
    print(report.table())
    print(f"report: {report_path}  breakdown: {csv_path}  timeline: {svg}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="parplan", description="compile, verify and simulate "
                                "parallelization plans")
    sub = p.add_subparsers(dest="command", required=True)
    c = sub.add_parser("compile", help="apply a strategy and emit an execution plan")
    c.add_argument("--graph", required=True)
    c.add_argument("--cluster", required=True)
    c.add_argument("--strategy", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--seed", type=int, default=None)
    c.set_defaults(func=cmd_compile)
    v = sub.add_parser("verify", help="check a plan against sequential execution")
    v.add_argument("--plan", required=True)
    v.add_argument("--graph", required=True)
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_verify)
    s = sub.add_parser("simulate", help="simulate a plan and write report, CSV and SVG")
    s.add_argument("--plan", required=True)
    s.add_argument("--cluster", required=True)
    s.add_argument("--svg", required=True)
    s.add_argument("--report", default=None)
    s.add_argument("--csv", default=None)
    s.set_defaults(func=cmd_simulate)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    level = os.environ.get("PARPLAN_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except PlanError as exc:
        print(f"error [{exc.phase}]: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

"""End-to-end compilation: strategy -> validate -> order -> materialize -> collectives -> lower."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from typing import Any, Dict, Optional, Union

from .commplan import pattern_match_collectives
from .errors import PlanError, ScheduleError
from .graph import ClusterSpec, PlanGraph, graph_document, load_graph
from .materialize import insert_frees, materialize
from .schedule import CycleReport, complete_order, validate
from .simulate import ExecutionPlan, lower
from .strategies import StrategyConfig, apply_strategy

log = logging.getLogger(__name__)

PLAN_FORMAT = "parplan-plan/1"


class InfeasibleSchedule(ScheduleError):
    def __init__(self, report: CycleReport):
        self.report = report
        super().__init__(report.render())


@dataclass
class CompileResult:
    source: PlanGraph
    graph: PlanGraph
    plan: ExecutionPlan
    cluster: ClusterSpec
    strategy: StrategyConfig

    def document(self) -> Dict[str, Any]:
        return {
            "format": PLAN_FORMAT,
            "strategy": self.strategy.to_dict(),
            "cluster": self.cluster.to_dict(),
            "graph": graph_document(self.source),
            "state": self.graph.to_state(),
            "families": self.graph.meta.get("families", []),
            "execution": self.plan.to_dict(),
        }


def compile_plan(graph: Union[PlanGraph, Dict[str, Any], str], cluster: ClusterSpec,
                 strategy: StrategyConfig, collectives: bool = True,
                 frees: bool = True) -> CompileResult:
    source = graph if isinstance(graph, PlanGraph) else load_graph(graph)
    g = source.copy()
    log.info("strategy %s on %d devices", strategy.name, strategy.ndevs)
    apply_strategy(g, strategy)
    used = set(g.assignment.values())
    unknown = sorted(used - set(cluster.device_ids))
    if unknown:
        raise ScheduleError(f"ops assigned to devices missing from the cluster: {unknown}")
    result = validate(g)
    if not result.ok:
        raise InfeasibleSchedule(result)
    complete_order(g, result)
    materialize(g)
    if collectives:
        pattern_match_collectives(g, cluster)
    if frees:
        insert_frees(g)
    plan = lower(g, cluster)
    log.info("compiled %d ops into %d lanes", len(g.ops), len(plan.lanes))
    return CompileResult(source, g, plan, cluster, strategy)


def load_plan(doc: Dict[str, Any]):
    """(source graph, compiled graph, execution plan) from a plan document."""
    if not isinstance(doc, dict) or doc.get("format") != PLAN_FORMAT:
        raise PlanError(f"not a {PLAN_FORMAT} document")
    try:
        source = load_graph(copy.deepcopy(doc["graph"]))
        g = PlanGraph.from_state(doc["state"])
        plan = ExecutionPlan.from_dict(doc["execution"])
    except KeyError as exc:
        raise PlanError(f"plan document misses {exc}") from None
    return source, g, plan

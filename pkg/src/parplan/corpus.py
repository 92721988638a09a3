"""Randomized compile-and-check cases shared by the test suites."""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple

from .commplan import collective_count, plan_comm_cost
from .compiler import compile_plan
from .graph import ClusterSpec, load_graph
from .models import random_graph
from .refexec import compare, random_inputs, run_plan, run_reference
from .simulate import simulate
from .strategies import StrategyConfig


def _layers(doc: Dict[str, Any]) -> int:
    return len({op["attrs"]["layer"] for op in doc["ops"] if "layer" in op.get("attrs", {})})


def random_case(seed: int, batch: int = 4, max_ops: int = 12
                ) -> Tuple[Dict[str, Any], StrategyConfig, ClusterSpec]:
    """A random graph, a random built-in strategy for it and a 2-4 device cluster."""
    rng = random.Random(seed)
    doc = random_graph(rng, batch, max_ops)
    layers = _layers(doc)
    kind = rng.choice(["dp", "tp", "gpipe", "1f1b", "hybrid"])
    if kind in ("gpipe", "1f1b") and layers >= 2:
        S = rng.randint(2, min(4, layers))
        cfg = StrategyConfig(kind, S, K=rng.choice([1, 2, 4]), S=S)
        ndevs = S
    elif kind == "hybrid" and layers >= 2:
        cfg = StrategyConfig("hybrid", 4, K=rng.choice([1, 2]), S=2, params={"dp": 2})
        ndevs = 4
    elif kind == "tp":
        ndevs = rng.randint(2, 4)
        cfg = StrategyConfig("tp", ndevs)
    else:
        ndevs = rng.choice([2, 4])
        cfg = StrategyConfig("dp", ndevs)
    group = rng.choice([None, 2]) if ndevs == 4 else None
    return doc, cfg, ClusterSpec.uniform(ndevs, group_size=group)


@dataclass
class CaseResult:
    strategy: str
    ndevs: int
    mismatch: Optional[tuple]
    cost_before: float
    cost_after: float
    makespan: float
    all_reduces: int


def check_case(doc, cfg: StrategyConfig, cluster: ClusterSpec, seed: int = 0) -> CaseResult:
    """Compile with and without collectives, run both oracles and simulate."""
    ref_graph = load_graph(doc)
    inputs = random_inputs(ref_graph, seed)
    ref = run_reference(ref_graph, inputs)
    naive = compile_plan(doc, cluster, StrategyConfig.from_dict(cfg.to_dict()), collectives=False)
    res = compile_plan(doc, cluster, StrategyConfig.from_dict(cfg.to_dict()))
    bad = compare(ref, run_plan(res.graph, inputs))
    if bad is None:
        bad = compare(ref, run_plan(naive.graph, inputs))
    report = simulate(res.plan)
    return CaseResult(cfg.name, cfg.ndevs, bad, plan_comm_cost(naive.graph, cluster),
                      plan_comm_cost(res.graph, cluster), report.makespan,
                      collective_count(res.graph, "all-reduce"))

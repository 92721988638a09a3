import pytest

from conftest import oracle_mismatch
from parplan.commplan import (collective_count, families, family_table, naive_cost_total,
                              pattern_match_collectives, plan_comm_cost)
from parplan.compiler import compile_plan
from parplan.corpus import check_case, random_case
from parplan.graph import ClusterSpec, load_graph
from parplan.models import mlp
from parplan.strategies import StrategyConfig


@pytest.mark.parametrize("n", [2, 4])
def test_data_parallel_sync_is_one_all_reduce_per_weight(n):
    doc = mlp(batch=4, dims=(4, 4, 4))
    res = compile_plan(doc, ClusterSpec.uniform(n), StrategyConfig("dp", n))
    g = res.graph
    weights = [p for p in g.ptensors.values() if p.kind == "weight" and p.grad_of is None
               and not p.id.endswith(".new")]
    colls = [o for o in g.ops.values() if o.kind == "collective"]
    by_tensor = {}
    for op in colls:
        pid = g.vtensors[(op.inputs or op.outputs)[0]].ptensor
        by_tensor.setdefault(pid, set()).add(op.attrs["collective_id"])
    assert collective_count(g, "all-reduce") == len(weights) == 2
    assert set(by_tensor) == {"dw0", "dw1"}
    assert not any(o.kind in ("send", "recv") and
                   g.vtensors[(o.inputs or o.outputs)[0]].ptensor.startswith("dw")
                   for o in g.ops.values())
    assert oracle_mismatch(doc, g) is None


def test_naive_plan_without_collectives_uses_point_to_point():
    doc = mlp(batch=4, dims=(4, 4, 4))
    res = compile_plan(doc, ClusterSpec.uniform(2), StrategyConfig("dp", 2), collectives=False)
    assert collective_count(res.graph) == 0
    assert sum(o.kind == "send" for o in res.graph.ops.values()) == 4


def test_same_device_family_untouched():
    doc = mlp(batch=4, dims=(4, 4, 4))
    res = compile_plan(doc, ClusterSpec.uniform(1), StrategyConfig("single", 1))
    assert collective_count(res.graph) == 0
    assert not any(o.inserted and o.kind != "free" for o in res.graph.ops.values())


def test_family_table_reports_replacements():
    doc = mlp(batch=4, dims=(4, 4, 4))
    res = compile_plan(doc, ClusterSpec.uniform(2), StrategyConfig("dp", 2))
    rows = [r for r in family_table(res.graph) if r[5]]
    assert rows and all("all-reduce" in r[2] for r in rows)
    assert all(r[4] <= r[3] for r in rows)


def test_point_to_point_pipeline_transfers_kept():
    from parplan.models import pipeline_model
    doc = pipeline_model(layers=2, batch=4)
    res = compile_plan(doc, ClusterSpec.uniform(2), StrategyConfig("gpipe", 2, K=2, S=2))
    assert collective_count(res.graph) == 0
    assert any(o.kind == "send" for o in res.graph.ops.values())


@pytest.mark.parametrize("seed", range(25))
def test_cost_never_increases(seed):
    r = check_case(*random_case(1000 + seed))
    assert r.mismatch is None
    assert r.cost_after <= r.cost_before * (1 + 1e-12)

import random

import pytest
from hypothesis import given, settings, strategies as st

from conftest import brute_force_feasible, cycle_is_real, random_schedule_case
from parplan.compiler import compile_plan
from parplan.errors import GraphError, ScheduleError
from parplan.graph import ClusterSpec, load_graph
from parplan.models import DocBuilder, mlp, pipeline_model
from parplan.schedule import (complete_order, derive_data_deps, op_assign, op_order,
                              validate)
from parplan.strategies import StrategyConfig
from parplan.transform import ReplicaAlgo, SplitAlgo, ValueSplitAlgo, op_trans


def chain(n=2, shape=(4, 4)):
    b = DocBuilder("chain")
    t = b.tensor("t0", shape)
    for i in range(n):
        t = b.op(chr(ord("A") + i), "identity", [t], f"t{i + 1}")
    return load_graph(b.document())


def test_assign_and_reassign(caplog):
    g = chain()
    op_assign(g, "A", 0)
    op_assign(g, "A", 1)
    assert g.assignment["A"] == 1 and "reassigned" in caplog.text
    with pytest.raises(GraphError):
        op_assign(g, "Z", 0)
    with pytest.raises(Exception):
        op_assign(g, "A", 5, ClusterSpec.uniform(2))


def test_inserted_kinds_cannot_be_assigned():
    g = chain()
    op_assign(g, "A", 0)
    op_assign(g, "B", 1)
    complete_order(g)
    from parplan.materialize import materialize
    materialize(g)
    send = next(o for o in g.ops.values() if o.kind == "send")
    with pytest.raises(ScheduleError):
        op_assign(g, send.id, 0)


def test_self_order_rejected():
    g = chain()
    with pytest.raises(ScheduleError):
        op_order(g, "A", "A")


def test_intersection_based_deps():
    g = chain()
    op_trans(g, "A", SplitAlgo(0, 2, output=True))
    op_trans(g, "B", SplitAlgo(1, 2, output=True))
    pairs = {(e.producer, e.consumer) for e in derive_data_deps(g)}
    assert pairs == {(a, b) for a in ("A.0", "A.1") for b in ("B.0", "B.1")}
    h = chain()
    op_trans(h, "A", SplitAlgo(0, 2, output=True))
    op_trans(h, "B", SplitAlgo(0, 2, output=True))
    pairs = {(e.producer, e.consumer) for e in derive_data_deps(h)}
    assert pairs == {("A.0", "B.0"), ("A.1", "B.1")}


def test_value_parts_are_all_of():
    b = DocBuilder("mm")
    b.tensor("x", (2, 4))
    b.tensor("w", (4, 2), "weight")
    b.op("mm", "matmul", ["x", "w"], "y")
    b.op("use", "identity", ["y"], "z")
    g = load_graph(b.document())
    op_trans(g, "mm", ValueSplitAlgo(2))
    deps = [e for e in derive_data_deps(g) if e.consumer == "use"]
    assert len(deps) == 2 and {e.mode for e in deps} == {"all-of"}
    assert len({e.group for e in deps}) == 2


def test_replicas_are_any_of_and_local_choice_wins():
    g = chain()
    op_trans(g, "A", ReplicaAlgo(2))
    deps = [e for e in derive_data_deps(g) if e.consumer == "B"]
    assert len(deps) == 2 and {e.mode for e in deps} == {"any-of"}
    g.assignment.update({"A.0": 1, "A.1": 0, "B": 0})
    sched = complete_order(g)
    ((pick, region),) = sched.choices[g.ops["B"].inputs[0]]
    assert region == ((0, 4), (0, 4))
    assert g.vtensors[pick].owner == "A.1"


def test_dag_is_feasible_and_ordered():
    g = chain()
    g.assignment.update({"A": 0, "B": 0})
    assert validate(g).ok
    assert complete_order(g).orders == {0: ["A", "B"]}


def test_contradicting_orders_reported():
    g = chain(3)
    op_order(g, "A", "C")
    op_order(g, "C", "A")
    r = validate(g)
    assert not r.ok
    kinds = [k for _, _, k in r.cycle]
    assert kinds.count("order") >= 1 and cycle_is_real(g, r)
    text = r.render()
    assert "-[order]->" in text and "replica choices" in text
    g.assignment.update(dict.fromkeys(g.ops, 0))
    with pytest.raises(ScheduleError):
        complete_order(g)


def test_order_against_data_is_a_cycle():
    g = chain(2)
    op_order(g, "B", "A")
    r = validate(g)
    assert not r.ok
    assert {(a, b, k) for a, b, k in r.cycle} == {("A", "B", "data"), ("B", "A", "order")}


def test_replica_choice_can_break_cycle():
    g = chain()
    op_trans(g, "A", ReplicaAlgo(2))
    g.assignment.update({"A.0": 0, "A.1": 1, "B": 0})
    op_order(g, "B", "A.0")
    r = validate(g)
    assert r.ok
    assert g.vtensors[next(iter(r.choices.values()))].owner == "A.1"


def test_gpipe_stage_order():
    doc = pipeline_model(layers=2, batch=4)
    res = compile_plan(doc, ClusterSpec.uniform(2), StrategyConfig("gpipe", 2, K=2, S=2))
    g = res.graph

    def phases(dev):
        seq = []
        for oid in g.device_orders()[dev]:
            op = g.ops[oid]
            if op.inserted:
                continue
            tag = ("B" if op.direction == "backward" else "F", op.micro_batch)
            if not seq or seq[-1] != tag:
                seq.append(tag)
        return seq

    assert phases(0) == [("F", 0), ("F", 1), ("B", 0), ("B", 1)]
    assert phases(1) == [("F", 0), ("F", 1), ("B", 0), ("B", 1)]


def test_order_is_linear_extension_and_deterministic():
    g = load_graph(mlp())
    for oid in list(g.ops):
        g.assignment[oid] = hash(oid) % 2
    seq = complete_order(g).sequence
    pos = {o: i for i, o in enumerate(seq)}
    for e in derive_data_deps(g):
        assert pos[e.producer] < pos[e.consumer]
    again = load_graph(mlp())
    again.assignment = dict(g.assignment)
    assert complete_order(again).sequence == seq


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 10**6))
def test_validate_matches_brute_force(seed):
    g = random_schedule_case(random.Random(seed))
    r = validate(g)
    assert r.ok == brute_force_feasible(g)
    if r.ok:
        seq = complete_order(g).sequence
        pos = {o: i for i, o in enumerate(seq)}
        assert all(pos[a] < pos[b] for a, b in g.happen_before)
    else:
        assert cycle_is_real(g, r)

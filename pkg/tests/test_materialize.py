import random
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import finish, oracle_mismatch, random_schedule_case
from parplan.errors import CoverageError, MaterializeError
from parplan.graph import load_graph
from parplan.materialize import first_free_after, insert_frees, materialize, union_size
from parplan.models import DocBuilder
from parplan.schedule import complete_order, op_order, validate
from parplan.transform import SplitAlgo, ValueSplitAlgo, mark_recompute, op_trans


def two_stage(shape=(4, 4)):
    b = DocBuilder("ab")
    b.tensor("x", shape)
    b.op("A", "identity", ["x"], "y")
    b.op("B", "identity", ["y"], "z")
    return b.document()


def test_column_producers_row_consumer():
    doc = two_stage()
    g = load_graph(doc)
    op_trans(g, "A", SplitAlgo(1, 2, output=True))  # left / right halves
    op_trans(g, "B", SplitAlgo(0, 2, output=True))  # top / bottom halves
    g.assignment.update({"A.0": 0, "A.1": 1, "B.0": 0, "B.1": 1})
    finish(g)
    kinds = Counter(o.kind for o in g.ops.values() if o.inserted)
    # every producer half is cut into two quarters, one of which crosses devices
    assert kinds == {"split": 4, "send": 2, "recv": 2, "concat": 2}
    cat = next(o for o in g.ops.values() if o.kind == "concat" and g.assignment[o.id] == 0)
    regions = [g.vtensors[v].region for v in cat.inputs]
    assert regions == [((0, 2), (0, 2)), ((0, 2), (2, 4))]
    assert oracle_mismatch(doc, g) is None


def test_exact_match_elided():
    g = finish(load_graph(two_stage()))
    assert not any(o.inserted for o in g.ops.values())
    h = load_graph(two_stage())
    h.assignment.update({"A": 0, "B": 1})
    finish(h)
    assert sorted(o.kind for o in h.ops.values() if o.inserted) == ["recv", "send"]


def test_value_parts_reduced():
    b = DocBuilder("mm")
    b.tensor("x", (4, 4))
    b.tensor("w", (4, 4), "weight")
    b.op("mm", "matmul", ["x", "w"], "y")
    b.op("use", "identity", ["y"], "z")
    doc = b.document()
    g = load_graph(doc)
    op_trans(g, "mm", ValueSplitAlgo(2))
    g.assignment.update({"mm.0": 0, "mm.1": 1, "use": 0})
    finish(g)
    assert sum(o.kind == "reduce-assemble" for o in g.ops.values()) == 1
    assert oracle_mismatch(doc, g) is None


def test_uncovered_region():
    g = load_graph(two_stage())
    op_trans(g, "A", SplitAlgo(0, 2, output=True))
    g.assignment.update(dict.fromkeys(g.ops, 0))
    complete_order(g)
    cvid = g.ops["B"].inputs[0]
    g.meta["choices"][cvid] = g.meta["choices"][cvid][:1]
    with pytest.raises(CoverageError, match=r"\[2,4\)"):
        materialize(g)


def test_needs_order_first():
    with pytest.raises(MaterializeError):
        materialize(load_graph(two_stage()))


def test_free_after_last_reader():
    b = DocBuilder("fan")
    b.tensor("x", (2, 2))
    b.op("A", "identity", ["x"], "y")
    b.op("B", "identity", ["y"], "z")
    b.op("C", "elementwise", ["y", "z"], "u", fn="add")
    g = insert_frees(finish(load_graph(b.document())))
    seq = g.sequence
    free_y = first_free_after(g, g.ops["A"].outputs[0])
    assert seq.index(free_y) == seq.index("C") + 1
    assert seq.index(first_free_after(g, g.ops["B"].outputs[0])) > seq.index("C")


def test_weights_never_freed():
    b = DocBuilder("w")
    b.tensor("x", (2, 2))
    b.tensor("w", (2, 2), "weight")
    b.op("A", "matmul", ["x", "w"], "y")
    g = insert_frees(finish(load_graph(b.document())))
    freed = {g.vtensors[o.inputs[0]].ptensor for o in g.ops.values() if o.kind == "free"}
    assert freed == {"x"}


def test_recompute_frees_activation_early():
    b = DocBuilder("rc")
    b.tensor("x", (2, 2))
    b.tensor("w", (2, 2), "weight")
    b.tensor("dy", (2, 2), "gradient", grad_of="y")
    b.op("F", "matmul", ["x", "w"], "y")
    b.op("G", "identity", ["y"], "out")
    b.op("F.dw", "matmul", ["x", "dy"], "dw", out_kind="gradient", grad_of="w",
         direction="backward", backward_of="F", trans_a=True)
    b.op("H.b", "elementwise", ["y", "dy"], "dz", out_kind="gradient", grad_of="y",
         direction="backward", fn="mul")
    doc = b.document()
    g = load_graph(doc)
    rid = mark_recompute(g, "F")
    op_order(g, "G", rid)
    g = insert_frees(finish(g))
    seq = g.sequence
    early = first_free_after(g, g.ops["F"].outputs[0])
    assert seq.index(early) < seq.index(rid) < seq.index("H.b")
    assert oracle_mismatch(doc, g) is None


def cells(region, shape=(8, 8)):
    m = np.zeros(shape, bool)
    m[tuple(slice(lo, hi) for lo, hi in region)] = True
    return m


interval = st.integers(0, 7).flatmap(lambda lo: st.integers(lo + 1, 8).map(lambda hi: (lo, hi)))


@given(st.lists(st.tuples(interval, interval), min_size=0, max_size=5))
def test_union_size_matches_cells(regions):
    want = int(np.logical_or.reduce([cells(r) for r in regions] or [np.zeros((8, 8), bool)]).sum())
    assert union_size(list(regions)) == want


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 10**6))
def test_random_plans_preserve_semantics(seed):
    g = random_schedule_case(random.Random(seed))
    if not validate(g).ok:
        return
    finish(g)
    sends = [o for o in g.ops.values() if o.kind == "send"]
    recvs = {o.attrs["piece"]: o for o in g.ops.values() if o.kind == "recv"}
    assert len(recvs) == len(sends)
    for s in sends:
        r = recvs[s.attrs["piece"]]
        assert g.assignment[r.id] == s.attrs["dst"] and g.assignment[s.id] == s.attrs["src"]
        assert g.sequence.index(s.id) < g.sequence.index(r.id)
    assert oracle_mismatch(g.meta["source_doc"], g) is None

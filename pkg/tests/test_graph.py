import copy
import json

import pytest
from hypothesis import given, strategies as st

from parplan.errors import GraphError, SchemaError
from parplan.graph import (ClusterSpec, Mask, full_region, graph_document, load_graph,
                           mask_intersect, region_intersect, PlanGraph)
from parplan.models import mlp


def test_chain_ingestion(two_op_doc):
    g = load_graph(two_op_doc)
    assert len(g.ops) == 2 and len(g.ptensors) == 3 and len(g.vtensors) == 4
    for vt in g.vtensors.values():
        assert vt.mask == Mask(full_region((4, 4)))
        assert vt.mask.value == (0, 1) and vt.mask.replica == (0, 1)


def test_shared_ptensor_distinct_vtensors(two_op_doc):
    g = load_graph(two_op_doc)
    out_a = g.vtensors[g.ops["A"].outputs[0]]
    in_b = g.vtensors[g.ops["B"].inputs[0]]
    assert out_a.id != in_b.id
    assert out_a.ptensor == in_b.ptensor == "y"


def test_json_text_accepted(two_op_doc):
    assert len(load_graph(json.dumps(two_op_doc)).ops) == 2


def test_dangling_reference(two_op_doc):
    doc = copy.deepcopy(two_op_doc)
    doc["ops"][1]["inputs"] = ["nope"]
    with pytest.raises(GraphError, match="dangling"):
        load_graph(doc)


def test_unknown_field_rejected(two_op_doc):
    doc = copy.deepcopy(two_op_doc)
    doc["ops"][0]["colour"] = "red"
    with pytest.raises(SchemaError):
        load_graph(doc)


def test_shape_mismatch(two_op_doc):
    doc = copy.deepcopy(two_op_doc)
    doc["ptensors"][2]["shape"] = [4, 2]
    with pytest.raises(GraphError, match="shape mismatch"):
        load_graph(doc)


def test_reserved_kind_rejected(two_op_doc):
    doc = copy.deepcopy(two_op_doc)
    doc["ops"][0]["kind"] = "send"
    with pytest.raises(GraphError, match="reserved"):
        load_graph(doc)


def test_bad_extent():
    doc = {"ptensors": [{"id": "x", "shape": [0], "elem_size": 4, "kind": "activation"}],
           "ops": []}
    with pytest.raises(GraphError):
        load_graph(doc)


def test_intersect_examples():
    top = Mask(((0, 2), (0, 4)))
    left = Mask(((0, 4), (0, 2)))
    bottom = Mask(((2, 4), (0, 4)))
    full = Mask(full_region((4, 4)))
    assert mask_intersect(top, left) == ((0, 2), (0, 2))
    assert mask_intersect(full, full) == full.region
    assert mask_intersect(top, bottom) is None


def test_intersect_needs_same_ptensor(two_op_doc):
    g = load_graph(two_op_doc)
    a = g.vtensors[g.ops["A"].inputs[0]]
    b = g.vtensors[g.ops["B"].outputs[0]]
    with pytest.raises(GraphError):
        mask_intersect(a, b)


def test_mask_coordinates_validated():
    with pytest.raises(GraphError):
        Mask(((0, 2),), (2, 2))
    with pytest.raises(GraphError):
        Mask(((3, 2),))


def test_document_round_trip():
    doc = mlp()
    g = load_graph(doc)
    again = load_graph(graph_document(g))
    assert graph_document(again) == graph_document(g)


def test_state_round_trip():
    g = load_graph(mlp())
    g.assignment = {o: 0 for o in g.ops}
    g.happen_before.add(("fc0", "fc1"))
    h = PlanGraph.from_state(json.loads(json.dumps(g.to_state())))
    assert h.to_state() == g.to_state()


def test_cluster_links():
    c = ClusterSpec.uniform(4, group_size=2)
    assert c.link([0, 1]) is c.intra
    assert c.link([1, 2]) is c.inter
    assert ClusterSpec.from_dict(c.to_dict()).to_dict() == c.to_dict()


intervals = st.integers(0, 6).flatmap(lambda lo: st.integers(lo + 1, 8).map(lambda hi: (lo, hi)))
regions = st.lists(intervals, min_size=2, max_size=2).map(tuple)


@given(regions, regions)
def test_intersection_commutes(a, b):
    assert region_intersect(a, b) == region_intersect(b, a)


@given(regions)
def test_intersection_idempotent_and_full(a):
    assert region_intersect(a, a) == a
    assert region_intersect(a, full_region((8, 8))) == a


@given(regions, regions)
def test_intersection_matches_cell_count(a, b):
    import numpy as np
    ma = np.zeros((8, 8), bool)
    mb = np.zeros((8, 8), bool)
    ma[a[0][0]:a[0][1], a[1][0]:a[1][1]] = True
    mb[b[0][0]:b[0][1], b[1][0]:b[1][1]] = True
    r = region_intersect(a, b)
    both = (ma & mb).sum()
    if r is None:
        assert both == 0
    else:
        assert both == (r[0][1] - r[0][0]) * (r[1][1] - r[1][0])

import numpy as np
import pytest

from parplan.graph import ClusterSpec, Link, load_graph
from parplan.refexec import compare, random_inputs, run_plan, run_reference


def oracle_mismatch(doc, graph, seed=0):
    """First difference between sequential execution of ``doc`` and the compiled plan."""
    ref = load_graph(doc)
    inputs = random_inputs(ref, seed)
    return compare(run_reference(ref, inputs), run_plan(graph, inputs))


def free_comm_cluster(n, group_size=None):
    inf = Link(float("inf"), 0.0)
    return ClusterSpec.uniform(n, group_size=group_size, intra=inf, inter=inf)


@pytest.fixture
def two_op_doc():
    return {
        "name": "chain",
        "ptensors": [
            {"id": "x", "shape": [4, 4], "elem_size": 4, "kind": "activation"},
            {"id": "y", "shape": [4, 4], "elem_size": 4, "kind": "activation"},
            {"id": "z", "shape": [4, 4], "elem_size": 4, "kind": "activation"},
        ],
        "ops": [
            {"id": "A", "kind": "identity", "inputs": ["x"], "outputs": ["y"],
             "direction": "forward", "flops": 16},
            {"id": "B", "kind": "identity", "inputs": ["y"], "outputs": ["z"],
             "direction": "forward", "flops": 16},
        ],
    }


def finish(g, default_device=0):
    """Assign leftovers, order and materialize ``g`` so it can be executed."""
    from parplan.materialize import materialize
    from parplan.schedule import complete_order
    for oid in g.ops:
        g.assignment.setdefault(oid, default_device)
    complete_order(g)
    materialize(g)
    return g


def matmul_doc(m=4, k=8, n=8, backward=False):
    from parplan.models import DocBuilder
    b = DocBuilder("mm")
    b.tensor("x", (m, k))
    b.tensor("w", (k, n), "weight")
    if backward:
        b.tensor("dy", (m, n), "gradient", grad_of="mm.y")
        b.linear("mm", "x", "w", 0, True, "dy", need_dx=True)
    else:
        b.op("mm", "matmul", ["x", "w"], "y", batch_dim=[0, 0])
    return b.document()


def random_schedule_case(rng, max_ops=10, max_replicated=3, ndevs=3):
    """Small random graph with replicated producers, placements and order edges."""
    from parplan.models import DocBuilder
    from parplan.transform import ReplicaAlgo, SplitAlgo, op_trans
    b = DocBuilder("sched")
    tensors = [b.tensor("t0", (4,))]
    n = rng.randint(3, max_ops)
    for i in range(1, n + 1):
        src = rng.sample(tensors, min(len(tensors), rng.choice([1, 2])))
        kind = "identity" if len(src) == 1 else "elementwise"
        attrs = {} if kind == "identity" else {"fn": "add"}
        tensors.append(b.op(f"o{i}", kind, src, f"t{i}", **attrs))
    doc = b.document()
    g = load_graph(doc)
    g.meta["source_doc"] = doc
    ids = sorted(g.ops)
    for oid in rng.sample(ids, rng.randint(0, min(max_replicated, len(ids)))):
        op_trans(g, oid, ReplicaAlgo(2))
    for oid in sorted(g.ops):
        if rng.random() < 0.2:
            op_trans(g, oid, SplitAlgo(0, 2, output=True))
    for oid in g.ops:
        g.assignment[oid] = rng.randrange(ndevs)
    ops = sorted(g.ops)
    for _ in range(rng.randint(0, 3)):
        a, c = rng.sample(ops, 2)
        g.happen_before.add((a, c))
    return g


def brute_force_feasible(g):
    """Independent check: some replica choice leaves the dependency graph acyclic."""
    import itertools
    import networkx as nx
    from parplan.graph import region_intersect
    import numpy as np
    fixed, choices = set(), set()
    outs = [vt for vt in g.vtensors.values() if vt.side == "out"]
    for oid, op in g.ops.items():
        for vid in op.inputs:
            c = g.vtensors[vid]
            shape = g.ptensors[c.ptensor].shape
            # per element and value part, the producers holding a copy of it
            need = {}
            for p in outs:
                if p.owner == oid or p.ptensor != c.ptensor:
                    continue
                if region_intersect(p.region, c.region) is None:
                    continue
                cover = np.zeros(shape, bool)
                cover[tuple(slice(lo, hi) for lo, hi in p.region)] = True
                inner = cover[tuple(slice(lo, hi) for lo, hi in c.region)]
                for idx in zip(*np.nonzero(inner)):
                    need.setdefault((idx, p.mask.value), set()).add(p.owner)
            for owners in need.values():
                if len(owners) == 1:
                    fixed.add((next(iter(owners)), oid))
                else:
                    choices.add(tuple((o, oid) for o in sorted(owners)))
    choices = sorted(choices)
    base = fixed | set(g.happen_before)
    for pick in itertools.product(*choices):
        d = nx.DiGraph()
        d.add_nodes_from(g.ops)
        d.add_edges_from(base | set(pick))
        if nx.is_directed_acyclic_graph(d):
            return True
    return False


def cycle_is_real(g, report):
    """Every reported edge exists and the edges close a loop."""
    cyc = report.cycle
    if not cyc:
        return False
    for (a, b, kind), nxt in zip(cyc, cyc[1:] + cyc[:1]):
        if b != nxt[0]:
            return False
        if kind == "order":
            if (a, b) not in g.happen_before:
                return False
        else:
            made = {g.vtensors[v].ptensor for v in g.ops[a].outputs}
            read = {g.vtensors[v].ptensor for v in g.ops[b].inputs}
            if not made & read:
                return False
    return True


def gather_doc():
    """Rows produced on devices 0 and 1, consumed whole on device 2."""
    from parplan.models import DocBuilder
    b = DocBuilder("gather")
    b.tensor("x", (4, 2))
    b.op("A", "elementwise", ["x", "x"], "y", fn="mul")
    b.op("B", "identity", ["y"], "z")
    return b.document()


def cross_pieces(g):
    """Corrupt a plan: the two recvs feeding one concat swap their pieces."""
    concat = next(o for o in g.ops.values() if o.kind == "concat")
    recvs = [o for o in g.ops.values() if o.kind == "recv" and
             any(g.bindings.get(v) == o.outputs[0] for v in concat.inputs)]
    a, b = recvs[:2]
    a.attrs["piece"], b.attrs["piece"] = b.attrs["piece"], a.attrs["piece"]
    return g


def stage_phases(g, dev):
    """Collapsed (phase, micro-batch) sequence of the non-inserted ops on ``dev``."""
    seq = []
    for oid in g.device_orders()[dev]:
        op = g.ops[oid]
        if op.inserted or op.micro_batch is None:
            continue
        tag = ("B" if op.direction == "backward" or op.recompute_of else "F", op.micro_batch)
        if not seq or seq[-1] != tag:
            seq.append(tag)
    return seq


def custom_last_device(g, cfg):
    """A user strategy: every op on the highest device id."""
    from parplan.schedule import op_assign
    for oid in sorted(g.ops):
        op_assign(g, oid, cfg.ndevs - 1)
    return g


def split_then_gather(g, cfg):
    """A user strategy: op A row-split over the devices, op B whole on the next one."""
    from parplan.schedule import op_assign
    from parplan.transform import SplitAlgo, op_trans
    parts = op_trans(g, "A", SplitAlgo(0, cfg.ndevs, output=True))
    for dev, oid in enumerate(parts):
        op_assign(g, oid, dev)
    op_assign(g, "B", cfg.ndevs)
    return g

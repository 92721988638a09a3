"""op-assign, op-order, data dependencies, feasibility validation and ordering."""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from .errors import ScheduleError
from .graph import (ClusterSpec, PlanGraph, Region, merge_boxes, region_cells,
                    region_contains, region_intersect)

log = logging.getLogger(__name__)

SEARCH_BUDGET = 200_000  # backtracking nodes


def op_assign(g: PlanGraph, op_id: str, device: int,
              cluster: Optional[ClusterSpec] = None) -> None:
    op = g.op(op_id)
    if op.inserted:
        raise ScheduleError(f"op {op_id}: kind {op.kind!r} is placed by materialization")
    if cluster is not None:
        cluster.device(device)
    elif not isinstance(device, int) or device < 0:
        raise ScheduleError(f"bad device id {device!r}")
    prev = g.assignment.get(op_id)
    if prev is not None and prev != device:
        log.warning("op %s reassigned from device %s to %s", op_id, prev, device)
    g.assignment[op_id] = device


def op_order(g: PlanGraph, before: str, after: str) -> None:
    if before == after:
        raise ScheduleError(f"self ordering edge on {before}")
    g.op(before)
    g.op(after)
    g.happen_before.add((before, after))


# ---------------------------------------------------------------------------
# data dependencies


@dataclass(frozen=True)
class DepEdge:
    producer: str
    consumer: str
    mode: str  # "all-of" | "any-of"
    region: Region
    group: int


@dataclass
class DepGroup:
    """One producer piece a consumer input needs; replicas are alternatives."""

    index: int
    consumer: str
    consumer_vt: str
    ptensor: str
    region: Region
    alternatives: List[str]  # producer vTensor ids, sorted by owner op id

    @property
    def mode(self) -> str:
        return "any-of" if len(self.alternatives) > 1 else "all-of"


def _backward_side(g: PlanGraph, op_id: str) -> bool:
    op = g.ops[op_id]
    return op.direction == "backward" or op.recompute_of is not None


def _serves(g: PlanGraph, producer: str, consumer: str, cloned: set) -> bool:
    """Recompute clones feed only the backward side; their originals feed the rest."""
    p = g.ops[producer]
    if p.recompute_of is not None:
        return _backward_side(g, consumer)
    if producer in cloned:
        return not _backward_side(g, consumer)
    return True


def dep_groups(g: PlanGraph) -> List[DepGroup]:
    groups: List[DepGroup] = []
    if g.materialized:
        for cvid in sorted(g.bindings):
            bvid = g.bindings[cvid]
            c, b = g.vtensors[cvid], g.vtensors[bvid]
            groups.append(DepGroup(len(groups), c.owner, cvid, c.ptensor, c.region, [bvid]))
        return groups
    cloned = {op.recompute_of for op in g.ops.values() if op.recompute_of}
    by_pt: Dict[str, list] = {}
    for vt in g.vtensors.values():
        if vt.side == "out":
            by_pt.setdefault(vt.ptensor, []).append(vt)
    for op_id, op in g.ops.items():
        for cvid in op.inputs:
            c = g.vtensors[cvid]
            prods = [p for p in by_pt.get(c.ptensor, ())
                     if p.owner != op_id and _serves(g, p.owner, op_id, cloned)
                     and region_intersect(p.region, c.region) is not None]
            if not prods:
                continue
            prods.sort(key=lambda v: (v.owner, v.id))
            cuts: List[List[int]] = [[] for _ in c.region]
            for p in prods:
                for d, (lo, hi) in enumerate(p.region):
                    cuts[d] += [lo, hi]
            # every cell needs one copy of each value part; copies are the alternatives
            keyed: Dict[tuple, List[Region]] = {}
            for cell in region_cells(c.region, cuts):
                by_value: Dict[tuple, List[str]] = {}
                for p in prods:
                    if region_contains(p.region, cell):
                        by_value.setdefault(p.mask.value, []).append(p.id)
                for value, alts in by_value.items():
                    keyed.setdefault((value, tuple(alts)), []).append(cell)
            found = [(region, value, alts) for (value, alts), cells in keyed.items()
                     for region in merge_boxes(cells)]
            for region, _, alts in sorted(found):
                groups.append(DepGroup(len(groups), op_id, cvid, c.ptensor, region, list(alts)))
    return groups


def derive_data_deps(g: PlanGraph) -> List[DepEdge]:
    edges = []
    for grp in dep_groups(g):
        for pvid in grp.alternatives:
            edges.append(DepEdge(g.vtensors[pvid].owner, grp.consumer, grp.mode,
                                 grp.region, grp.index))
    return edges


def _pair_edges(g: PlanGraph) -> List[Tuple[str, str]]:
    """send -> recv edges of a materialized graph."""
    recvs = {op.attrs.get("piece"): op.id for op in g.ops.values() if op.kind == "recv"}
    return [(op.id, recvs[op.attrs.get("piece")]) for op in g.ops.values()
            if op.kind == "send" and op.attrs.get("piece") in recvs]


# ---------------------------------------------------------------------------
# validation


@dataclass
class Feasible:
    choices: Dict[int, str]  # any-of group index -> chosen producer vTensor
    ok = True

    def render(self) -> str:
        return "feasible"


@dataclass
class CycleReport:
    cycle: List[Tuple[str, str, str]]  # (from, to, "data" | "order")
    choices: Dict[int, str]
    reason: str = "cycle"
    ok = False

    def render(self) -> str:
        head = "infeasible: " + self.reason
        lines = [f"{a} -[{kind}]-> {b}" for a, b, kind in self.cycle]
        vec = ", ".join(f"g{k}={v}" for k, v in sorted(self.choices.items()))
        return "\n".join([head] + lines + [f"replica choices: [{vec}]"])

    def __str__(self):
        return self.render()


def _heuristic_choice(g: PlanGraph, grp: DepGroup) -> str:
    home = g.assignment.get(grp.consumer)

    def key(vid):
        owner = g.vtensors[vid].owner
        dev = g.assignment.get(owner)
        return (dev != home or home is None, dev is None, dev if dev is not None else 0, owner)

    return min(grp.alternatives, key=key)


def _edges_for(g: PlanGraph, groups: Sequence[DepGroup], choice: Dict[int, str]):
    edges: Dict[Tuple[str, str], str] = {}
    for grp in groups:
        vid = choice.get(grp.index, grp.alternatives[0])
        edges.setdefault((g.vtensors[vid].owner, grp.consumer), "data")
    for a, b in _pair_edges(g):
        edges.setdefault((a, b), "data")
    for a, b in sorted(g.happen_before):
        edges.setdefault((a, b), "order")
    return edges


def find_cycle(nodes: Sequence[str], edges: Dict[Tuple[str, str], str]):
    """Iterative DFS; returns one cycle as [(a, b, provenance)] or None."""
    adj: Dict[str, List[str]] = {n: [] for n in nodes}
    for a, b in edges:
        adj.setdefault(a, []).append(b)
        adj.setdefault(b, [])
    for k in adj:
        adj[k].sort()
    color = dict.fromkeys(adj, 0)
    for root in sorted(adj):
        if color[root]:
            continue
        stack = [(root, iter(adj[root]))]
        path = [root]
        color[root] = 1
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                stack.pop()
                path.pop()
                color[node] = 2
                continue
            if color[nxt] == 1:
                cyc = path[path.index(nxt):] + [nxt]
                return [(a, b, edges[(a, b)]) for a, b in zip(cyc, cyc[1:])]
            if color[nxt] == 0:
                color[nxt] = 1
                path.append(nxt)
                stack.append((nxt, iter(adj[nxt])))
    return None


def validate(g: PlanGraph):
    """Feasible iff some replica choice makes the full dependency graph acyclic."""
    groups = dep_groups(g)
    nodes = sorted(g.ops)
    choice = {grp.index: _heuristic_choice(g, grp) for grp in groups}
    cyc = find_cycle(nodes, _edges_for(g, groups, choice))
    if cyc is None:
        return Feasible(choice)
    anyof = [grp for grp in groups if len(grp.alternatives) > 1]
    found = _search_choices(g, groups, choice)
    if found is None:
        return CycleReport(cyc, {grp.index: choice[grp.index] for grp in anyof},
                           "possibly infeasible (search budget)")
    if found is False:
        return CycleReport(cyc, {grp.index: choice[grp.index] for grp in anyof})
    return Feasible(found)


def _reaches(adj: Dict[str, Dict[str, int]], src: str, dst: str) -> bool:
    seen = {src}
    stack = [src]
    while stack:
        n = stack.pop()
        if n == dst:
            return True
        for m in adj.get(n, ()):
            if m not in seen:
                seen.add(m)
                stack.append(m)
    return False


def _search_choices(g: PlanGraph, groups: Sequence[DepGroup], choice: Dict[int, str]):
    """Backtracking over replica choices, pruning as soon as a partial choice
    closes a cycle. Groups of one consumer with the same candidate producers
    are decided together: picking one producer for all of them adds a subset
    of the edges any mixed pick would add. Returns the choice map, False when
    no choice is acyclic, or None when the budget runs out."""
    adj: Dict[str, Dict[str, int]] = {}

    def add(a, b):
        row = adj.setdefault(a, {})
        row[b] = row.get(b, 0) + 1

    def drop(a, b):
        adj[a][b] -= 1
        if not adj[a][b]:
            del adj[a][b]

    fixed = [(g.vtensors[grp.alternatives[0]].owner, grp.consumer)
             for grp in groups if len(grp.alternatives) == 1]
    for a, b in fixed + sorted(_pair_edges(g)) + sorted(g.happen_before):
        add(a, b)
    if find_cycle(sorted(g.ops), {(a, b): "" for a, row in adj.items() for b in row}):
        return False
    # (consumer, candidate owners) -> groups decided together
    variables: Dict[Tuple[str, Tuple[str, ...]], List[DepGroup]] = {}
    for grp in groups:
        if len(grp.alternatives) > 1:
            owners = tuple(sorted({g.vtensors[v].owner for v in grp.alternatives}))
            variables.setdefault((grp.consumer, owners), []).append(grp)
    order = sorted(variables, key=lambda k: (len(k[1]), k))
    picked: Dict[Tuple[str, Tuple[str, ...]], str] = {}
    budget = [SEARCH_BUDGET]

    def options(key):
        first = g.vtensors[choice[variables[key][0].index]].owner
        return [first] + [o for o in key[1] if o != first]

    def step(i):
        if i == len(order):
            return True
        key = order[i]
        consumer = key[0]
        for owner in options(key):
            budget[0] -= 1
            if budget[0] < 0:
                return None
            if _reaches(adj, consumer, owner):
                continue
            add(owner, consumer)
            picked[key] = owner
            res = step(i + 1)
            drop(owner, consumer)
            if res is not False:
                return res
        return False

    res = step(0)
    if res is not True:
        return res
    out = dict(choice)
    for key, owner in picked.items():
        for grp in variables[key]:
            out[grp.index] = next(v for v in grp.alternatives if g.vtensors[v].owner == owner)
    return out


# ---------------------------------------------------------------------------
# total order


@dataclass
class Schedule:
    sequence: List[str]
    orders: Dict[int, List[str]]
    # consumer vt -> [(producer vt, region taken from it)]
    choices: Dict[str, List[Tuple[str, Region]]] = field(default_factory=dict)


def order_key(g: PlanGraph, op_id: str):
    op = g.ops[op_id]
    return (op.micro_batch if op.micro_batch is not None else 0, op.order, op_id)


def topo_sort(g: PlanGraph, edges) -> List[str]:
    succ: Dict[str, List[str]] = {n: [] for n in g.ops}
    indeg = dict.fromkeys(g.ops, 0)
    for a, b in edges:
        succ[a].append(b)
        indeg[b] += 1
    heap = [(order_key(g, n), n) for n, d in indeg.items() if d == 0]
    heapq.heapify(heap)
    out = []
    while heap:
        _, n = heapq.heappop(heap)
        out.append(n)
        for m in succ[n]:
            indeg[m] -= 1
            if indeg[m] == 0:
                heapq.heappush(heap, (order_key(g, m), m))
    if len(out) != len(g.ops):
        raise ScheduleError("dependency graph has a cycle")
    return out


def complete_order(g: PlanGraph, result=None) -> Schedule:
    """Deterministic topological order; projects to per-device total orders."""
    missing = sorted(o for o in g.ops if o not in g.assignment)
    if missing:
        raise ScheduleError(f"ops without device assignment: {', '.join(missing[:8])}"
                            + (" ..." if len(missing) > 8 else ""))
    result = result if result is not None else validate(g)
    if not result.ok:
        raise ScheduleError("cannot order an infeasible graph\n" + result.render())
    groups = dep_groups(g)
    seq = topo_sort(g, _edges_for(g, groups, result.choices))
    chosen: Dict[str, List[Tuple[str, Region]]] = {}
    for grp in groups:
        pick = result.choices.get(grp.index, grp.alternatives[0])
        chosen.setdefault(grp.consumer_vt, []).append((pick, grp.region))
    g.sequence = seq
    g.meta["choices"] = chosen
    return Schedule(seq, g.device_orders(), chosen)

"""Replace naive point-to-point chains with searched collective sequences."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from .errors import CommPlanError
from .graph import ClusterSpec, OpNode, PlanGraph, Region
from .rvd import CommPlan, RVDLayout, search, to_rvd

log = logging.getLogger(__name__)


@dataclass
class Family:
    """Producers feeding one consumer class (same origin op, operand, micro-batch)."""

    id: str
    ptensor: str
    producers: List[str]
    consumers: List[str]
    naive_ops: List[str] = field(default_factory=list)
    src: Optional[RVDLayout] = None
    dst: Optional[RVDLayout] = None
    plan: Optional[CommPlan] = None
    naive_cost: float = 0.0
    replaced: bool = False
    reason: str = ""

    def summary(self) -> dict:
        return {
            "id": self.id, "ptensor": self.ptensor,
            "src": str(self.src.desc) if self.src else None,
            "dst": str(self.dst.desc) if self.dst else None,
            "steps": self.plan.primitives if self.plan else [],
            "naive_cost": self.naive_cost,
            "searched_cost": self.plan.cost if self.plan else None,
            "replaced": self.replaced, "reason": self.reason,
        }


def _bbox(regions: List[Region]) -> Region:
    return tuple((min(r[d][0] for r in regions), max(r[d][1] for r in regions))
                 for d in range(len(regions[0])))


def naive_cost(g: PlanGraph, ops: List[str], cluster: ClusterSpec) -> float:
    """Sends serialize on their sender; the slowest sender bounds the chain."""
    per_dev: Dict[int, float] = {}
    for op_id in ops:
        op = g.ops.get(op_id)
        if op is not None and op.kind == "send":
            link = cluster.link([op.attrs["src"], op.attrs["dst"]])
            per_dev[op.attrs["src"]] = per_dev.get(op.attrs["src"], 0.0) + link.time(op.attrs["bytes"])
    return max(per_dev.values(), default=0.0)


def families(g: PlanGraph) -> List[Family]:
    naive: Dict[str, List[str]] = g.meta.get("naive", {})
    choices: Dict[str, List[Tuple[str, Region]]] = g.meta.get("choices", {})
    classes: Dict[tuple, List[str]] = {}
    for cvid in naive:
        c = g.vtensors[cvid]
        op = g.ops[c.owner]
        key = (op.root, op.inputs.index(cvid), op.micro_batch if op.micro_batch is not None else -1,
               c.ptensor)
        classes.setdefault(key, []).append(cvid)
    out = []
    for n, (key, cvids) in enumerate(sorted(classes.items(), key=lambda kv: repr(kv[0]))):
        prods = sorted({p for c in cvids for p, _ in choices.get(c, [])})
        ops = [o for c in cvids for o in naive[c]]
        out.append(Family(f"fam{n}", key[3], prods, sorted(cvids), ops))
    return out


def _layouts(g: PlanGraph, fam: Family):
    shape = g.ptensors[fam.ptensor].shape
    cons = [(g.vtensors[c].mask, g.assignment[g.vtensors[c].owner]) for c in fam.consumers]
    prods = [(g.vtensors[p].mask, g.assignment[g.vtensors[p].owner]) for p in fam.producers]
    base = _bbox([m.region for m, _ in cons])
    if _bbox([m.region for m, _ in prods]) != base:
        return None, None
    # a consumer's value split is unusual; only full-value consumers form a target grid
    if any(m.value != (0, 1) for m, _ in cons):
        return None, None
    return to_rvd(prods, shape, base), to_rvd(cons, shape, base)


def pattern_match_collectives(g: PlanGraph, cluster: ClusterSpec) -> PlanGraph:
    """Swap each regular family's naive chain for its searched collective plan
    whenever the modeled cost does not increase."""
    if not g.materialized:
        raise CommPlanError("pattern matching needs a materialized graph")
    records = []
    shared: Dict[str, List[str]] = g.meta.get("shared", {})
    shared_src = {s for srcs in shared.values() for s in srcs}
    for fam in families(g):
        fam.naive_cost = naive_cost(g, fam.naive_ops, cluster)
        if not any(g.ops[o].kind == "send" for o in fam.naive_ops if o in g.ops):
            fam.reason = "local"
            records.append(fam.summary())
            continue
        followers = None
        if any(c in shared_src for c in fam.consumers):
            # another consumer reads the buffers this chain lands
            followers = _followers(g, fam, shared, shared_src)
            if followers is None:
                fam.reason = "shared transfer"
                records.append(fam.summary())
                continue
        devs_p = {g.assignment[g.vtensors[p].owner] for p in fam.producers}
        devs_c = {g.assignment[g.vtensors[c].owner] for c in fam.consumers}
        if len(devs_p) == 1 and len(devs_c) == 1:
            # a lone transfer is already point-to-point; a rendezvous would only add waiting
            fam.reason = "point-to-point"
            records.append(fam.summary())
            continue
        fam.src, fam.dst = _layouts(g, fam)
        if fam.src is None or fam.dst is None:
            fam.reason = "irregular"
            records.append(fam.summary())
            continue
        pos = {o: i for i, o in enumerate(g.sequence)}
        last_prod = max(pos[g.vtensors[p].owner] for p in fam.producers)
        first_cons = min(pos[g.vtensors[c].owner] for c in fam.consumers)
        if last_prod > first_cons:
            fam.reason = "interleaved"
            records.append(fam.summary())
            continue
        try:
            fam.plan = search(fam.src, fam.dst, cluster, g.ptensors[fam.ptensor].elem_size)
        except CommPlanError as exc:
            fam.reason = str(exc)
            records.append(fam.summary())
            continue
        if fam.plan.cost > fam.naive_cost:
            fam.reason = "naive cheaper"
            records.append(fam.summary())
            continue
        if followers and min(pos[g.vtensors[f].owner] for f in followers) < last_prod:
            fam.reason = "interleaved"
            records.append(fam.summary())
            continue
        _lower(g, fam, followers or [])
        fam.replaced = True
        fam.reason = "replaced"
        records.append(fam.summary())
    g.meta["families"] = records
    return g


def _followers(g: PlanGraph, fam: Family, shared: Dict[str, List[str]],
               shared_src) -> Optional[List[str]]:
    """Consumers that only reuse this family's landed pieces and want exactly what
    a family consumer on their device wants. They can read the collective output
    instead; anything else keeps the naive chain."""
    naive: Dict[str, List[str]] = g.meta.get("naive", {})
    mine = set(fam.consumers)
    by_dev = {g.assignment[g.vtensors[c].owner]: (g.vtensors[c].region, g.vtensors[c].mask.value)
              for c in fam.consumers}
    out = []
    for f, srcs in sorted(shared.items()):
        if not mine.intersection(srcs) or f in mine:
            continue
        if not mine.issuperset(srcs) or f in shared_src:
            return None
        if any(g.ops[o].kind in ("send", "recv") for o in naive.get(f, []) if o in g.ops):
            return None
        fv = g.vtensors[f]
        if by_dev.get(g.assignment[fv.owner]) != (fv.region, fv.mask.value):
            return None
        out.append(f)
    return out


def _lower(g: PlanGraph, fam: Family, followers: List[str]) -> None:
    anchor_pos = max(g.sequence.index(g.vtensors[p].owner) for p in fam.producers)
    anchor = g.sequence[anchor_pos]
    naive: Dict[str, List[str]] = g.meta.get("naive", {})
    for o in fam.naive_ops + [o for f in followers for o in naive.get(f, [])]:
        if o in g.ops:
            g.remove_op(o)
    counter = g.meta.get("inserted_count", 0)
    pt = fam.ptensor
    # device -> buffer vTensor currently holding this family's data
    holding: Dict[int, str] = {g.assignment[g.vtensors[p].owner]: p for p in fam.producers}
    new_ops: List[str] = []
    a = g.ops[anchor]
    for t, step in enumerate(fam.plan.steps):
        cid = f"{fam.id}.c{t}"
        before = set(step.before.grid)
        after = set(step.after.grid)
        nxt: Dict[int, str] = {}
        for dev in sorted(before | after):
            counter += 1
            srcs = step.transfers.get(dev, [])
            attrs = {
                "primitive": step.primitive, "k": step.k, "axis": step.axis,
                "collective_id": cid, "cost": step.cost, "relabel": step.relabel,
                "participants": sorted(before | after), "family": fam.id,
                "sources": [[s, [list(r) for r in region]] for s, region in srcs],
            }
            op = OpNode(f"collective.{counter}", "collective", direction=a.direction,
                        micro_batch=a.micro_batch, attrs=attrs, order=a.order)
            ins = [(pt, step.before.mask_of(dev))] if dev in before else []
            outs = [(pt, step.after.mask_of(dev))] if dev in after else []
            g.add_op(op, ins, outs)
            g.assignment[op.id] = dev
            if ins:
                g.bindings[op.inputs[0]] = holding[dev]
            if outs:
                nxt[dev] = op.outputs[0]
            new_ops.append(op.id)
        holding = nxt
    for c in fam.consumers + followers:
        dev = g.assignment[g.vtensors[c].owner]
        g.bindings[c] = holding[dev]
    pos = g.sequence.index(anchor)
    g.sequence[pos + 1:pos + 1] = new_ops
    g.meta["inserted_count"] = counter


def collective_count(g: PlanGraph, primitive: Optional[str] = None) -> int:
    """Number of distinct collective steps (not per-device ops)."""
    ids = {op.attrs["collective_id"] for op in g.ops.values()
           if op.kind == "collective" and (primitive is None or op.attrs["primitive"] == primitive)}
    return len(ids)


def plan_comm_cost(g: PlanGraph, cluster: ClusterSpec) -> float:
    """Modeled communication cost: naive sends per sender plus collective steps."""
    send_ops = [o for o in g.ops if g.ops[o].kind == "send"]
    steps: Dict[str, float] = {}
    for op in g.ops.values():
        if op.kind == "collective":
            steps[op.attrs["collective_id"]] = op.attrs["cost"]
    return naive_cost_total(g, send_ops, cluster) + sum(steps.values())


def naive_cost_total(g: PlanGraph, ops: List[str], cluster: ClusterSpec) -> float:
    total = 0.0
    for op_id in ops:
        op = g.ops[op_id]
        total += cluster.link([op.attrs["src"], op.attrs["dst"]]).time(op.attrs["bytes"])
    return total


def family_table(g: PlanGraph) -> List[Tuple[str, str, str, float, Optional[float], bool]]:
    return [(f["id"], f["ptensor"], " ".join(f["steps"]), f["naive_cost"], f["searched_cost"],
             f["replaced"]) for f in g.meta.get("families", [])]

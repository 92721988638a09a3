"""Data-dependency materialization: split, send/recv, concat/reduce insertion."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, List, Optional, Tuple

from .errors import CoverageError, MaterializeError
from .graph import (Mask, OpNode, PlanGraph, Region, format_region, merge_boxes, region_bbox,
                    region_cells, region_intersect)

NEVER_FREED = ("weight", "optimizer-state")


@dataclass
class TransferPiece:
    source: str  # producer vTensor id
    dest: str  # consumer vTensor id
    region: Region
    cross_device: bool


def union_size(regions: List[Region]) -> int:
    """Number of elements covered by at least one of ``regions``."""
    if not regions:
        return 0
    cuts: List[List[int]] = [[] for _ in regions[0]]
    for r in regions:
        for d, (lo, hi) in enumerate(r):
            cuts[d] += [lo, hi]
    bbox = region_bbox(regions)
    total = 0
    for cell in region_cells(bbox, cuts):
        if any(region_intersect(r, cell) == cell for r in regions):
            n = 1
            for lo, hi in cell:
                n *= hi - lo
            total += n
    return total


def check_coverage(g: PlanGraph, consumer_vt: str, pieces: List[Tuple[str, Region]]) -> None:
    """Every element of the consumer region must sum to exactly one full value."""
    c = g.vtensors[consumer_vt]
    want = c.mask.value
    cuts: List[List[int]] = [[] for _ in c.region]
    for _, region in pieces:
        for d, (lo, hi) in enumerate(region):
            cuts[d] += [lo, hi]
    for cell in region_cells(c.region, cuts):
        total = Fraction(0)
        for pvid, region in pieces:
            p = g.vtensors[pvid]
            if region_intersect(region, cell) != cell:
                continue
            if want != (0, 1):
                total += 1 if p.mask.value == want else 0
            else:
                total += Fraction(1, p.mask.value[1])
        if total != 1:
            what = "not covered" if total < 1 else "covered more than once"
            raise CoverageError(f"consumer {consumer_vt} ({c.ptensor}) region "
                                f"{format_region(cell)} is {what} by its chosen producers")


def _merged_pieces(g: PlanGraph, chosen: List[Tuple[str, Region]]) -> List[Tuple[str, Region]]:
    """One piece per producer wherever its chosen cells tile a box."""
    by_prod: Dict[str, List[Region]] = {}
    for pvid, region in chosen:
        by_prod.setdefault(pvid, []).append(tuple(map(tuple, region)))
    out = [(pvid, r) for pvid, regions in by_prod.items() for r in merge_boxes(regions)]
    return sorted(out, key=lambda pr: (_sort_key(g, pr[0]), pr[1]))


class _Builder:
    def __init__(self, g: PlanGraph):
        self.g = g
        self.after: Dict[str, List[str]] = {}
        self.before: Dict[str, List[str]] = {}
        self.counter = g.meta.get("inserted_count", 0)

    def add(self, kind: str, anchor: str, device: int, inputs, outputs, attrs,
            side: str) -> OpNode:
        g = self.g
        a = g.ops[anchor]
        self.counter += 1
        op = OpNode(f"{kind}.{self.counter}", kind, direction=a.direction,
                    micro_batch=a.micro_batch, attrs=attrs, order=a.order, origin=None)
        g.add_op(op, inputs, outputs)
        g.assignment[op.id] = device
        (self.after if side == "producer" else self.before).setdefault(anchor, []).append(op.id)
        return op


def _sort_key(g: PlanGraph, vid: str):
    vt = g.vtensors[vid]
    return (tuple(lo for lo, _ in vt.region), vt.mask.value, vt.owner)


def materialize(g: PlanGraph) -> PlanGraph:
    """Rewrite ``g`` in place so every consumer input reads a co-located buffer."""
    if g.sequence is None or "choices" not in g.meta:
        raise MaterializeError("materialize needs a completed order (run complete_order)")
    if g.materialized:
        raise MaterializeError("graph is already materialized")
    choices: Dict[str, List[Tuple[str, Region]]] = g.meta["choices"]
    inputs_only = set(g.input_ptensors())
    b = _Builder(g)
    naive: Dict[str, List[str]] = {}
    pieces_log: List[TransferPiece] = []
    # (producer vt, region, device) -> buffer already holding that piece there
    landed: Dict[Tuple[str, Region, int], str] = {}
    owner_of: Dict[str, str] = {}  # landed buffer -> consumer vt whose transfer made it
    shared: Dict[str, List[str]] = {}  # consumer vt -> consumer vts whose transfers it reuses
    for op_id in list(g.sequence):
        cdev = g.assignment[op_id]
        for cvid in list(g.ops[op_id].inputs):
            c = g.vtensors[cvid]
            if c.ptensor in inputs_only:
                continue
            prods = _merged_pieces(g, choices.get(cvid, []))
            if not prods:
                raise CoverageError(f"consumer {cvid} ({c.ptensor}) region "
                                    f"{format_region(c.region)} has no producer")
            check_coverage(g, cvid, prods)
            inserted: List[str] = []
            pieces: List[str] = []
            for pvid, ov in prods:
                p = g.vtensors[pvid]
                pdev = g.assignment[p.owner]
                src = pvid
                pmask = Mask(ov, p.mask.value, p.mask.replica)
                hit = landed.get((pvid, ov, cdev))
                if hit is not None:
                    if hit in owner_of and owner_of[hit] not in shared.setdefault(cvid, []):
                        shared[cvid].append(owner_of[hit])
                    pieces_log.append(TransferPiece(pvid, cvid, ov, pdev != cdev))
                    pieces.append(hit)
                    continue
                if ov != p.region:
                    sp = b.add("split", p.owner, pdev, [(p.ptensor, p.mask)],
                               [(p.ptensor, pmask)], {}, "producer")
                    g.bindings[sp.inputs[0]] = src
                    src = sp.outputs[0]
                    inserted.append(sp.id)
                if pdev != cdev:
                    piece = f"piece.{b.counter + 1}"
                    nbytes = pmask.nelems * g.ptensors[p.ptensor].elem_size
                    attrs = {"piece": piece, "src": pdev, "dst": cdev, "bytes": nbytes}
                    snd = b.add("send", p.owner, pdev, [(p.ptensor, pmask)], [],
                                dict(attrs), "producer")
                    g.bindings[snd.inputs[0]] = src
                    rcv = b.add("recv", op_id, cdev, [], [(p.ptensor, pmask)],
                                dict(attrs), "consumer")
                    src = rcv.outputs[0]
                    inserted += [snd.id, rcv.id]
                pieces_log.append(TransferPiece(pvid, cvid, ov, pdev != cdev))
                landed[(pvid, ov, cdev)] = src
                if src != pvid:
                    owner_of[src] = cvid
                pieces.append(src)
            single = g.vtensors[pieces[0]]
            if len(pieces) == 1 and single.region == c.region and \
                    single.mask.value in ((0, 1), c.mask.value):
                g.bindings[cvid] = pieces[0]
            else:
                partial = any(g.vtensors[v].mask.value[1] > 1 for v in pieces) \
                    and c.mask.value == (0, 1)
                kind = "reduce-assemble" if partial else "concat"
                asm = b.add(kind, op_id, cdev,
                            [(g.vtensors[v].ptensor, g.vtensors[v].mask) for v in pieces],
                            [(c.ptensor, Mask(c.region, c.mask.value))], {}, "consumer")
                for ivid, v in zip(asm.inputs, pieces):
                    g.bindings[ivid] = v
                g.bindings[cvid] = asm.outputs[0]
                inserted.append(asm.id)
            naive[cvid] = inserted
    seq: List[str] = []
    for op_id in g.sequence:
        seq += b.before.get(op_id, [])
        seq.append(op_id)
        seq += b.after.get(op_id, [])
    g.sequence = seq
    g.materialized = True
    g.meta["inserted_count"] = b.counter
    g.meta["naive"] = naive
    g.meta["pieces"] = pieces_log
    g.meta["shared"] = shared
    return g


def buffer_of(g: PlanGraph, vid: str) -> Tuple:
    """The storage a consumer vTensor reads: a bound vTensor or an initial input buffer."""
    bound = g.bindings.get(vid)
    if bound is not None:
        return ("vt", bound)
    vt = g.vtensors[vid]
    return ("init", vt.ptensor, vt.region, g.assignment[vt.owner])


def insert_frees(g: PlanGraph) -> PlanGraph:
    """Release every non-persistent buffer right after its last reader on its device."""
    if not g.materialized:
        raise MaterializeError("insert_frees needs a materialized graph")
    last: Dict[Tuple, str] = {}
    for op_id in g.sequence:
        if g.ops[op_id].kind == "free":
            continue
        for vid in g.ops[op_id].inputs:
            last[buffer_of(g, vid)] = op_id
    by_anchor: Dict[str, List[Tuple]] = {}
    for buf, op_id in last.items():
        pid = g.vtensors[buf[1]].ptensor if buf[0] == "vt" else buf[1]
        if g.ptensors[pid].kind in NEVER_FREED:
            continue
        by_anchor.setdefault(op_id, []).append(buf)
    counter = g.meta.get("inserted_count", 0)
    seq: List[str] = []
    for op_id in g.sequence:
        seq.append(op_id)
        for buf in sorted(by_anchor.get(op_id, []), key=repr):
            counter += 1
            anchor = g.ops[op_id]
            if buf[0] == "vt":
                vt = g.vtensors[buf[1]]
                spec = (vt.ptensor, vt.mask)
            else:
                spec = (buf[1], Mask(buf[2]))
            fop = OpNode(f"free.{counter}", "free", direction=anchor.direction,
                         micro_batch=anchor.micro_batch, order=anchor.order)
            g.add_op(fop, [spec], [])
            g.assignment[fop.id] = g.assignment[op_id]
            if buf[0] == "vt":
                g.bindings[fop.inputs[0]] = buf[1]
            seq.append(fop.id)
    g.sequence = seq
    g.meta["inserted_count"] = counter
    return g


def first_free_after(g: PlanGraph, vid: str) -> Optional[str]:
    for op_id in g.sequence:
        op = g.ops[op_id]
        if op.kind == "free" and g.bindings.get(op.inputs[0]) == vid:
            return op_id
    return None

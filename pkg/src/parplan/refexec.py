"""Reference interpreter: executes graphs and compiled plans on exact integers."""

from __future__ import annotations

from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ExecutionError, UnsupportedOpError
from .graph import Mask, OpNode, PlanGraph, Region, full_region, region_slices
from .schedule import topo_sort

SUPPORTED = ("matmul", "elementwise", "reduce-op", "embedding-lookup", "identity")


def _obj(a) -> np.ndarray:
    return np.asarray(a).astype(object)


def unsupported_kinds(g: PlanGraph) -> List[str]:
    return sorted({op.kind for op in g.ops.values()
                   if not op.inserted and op.kind not in SUPPORTED})


def kernel(op: OpNode, ins: Sequence[Tuple[np.ndarray, Mask]], out_masks: Sequence[Mask]):
    """Element-level semantics of a compute op on (possibly partial) operands."""
    kind, attrs = op.kind, op.attrs
    if kind == "matmul":
        a, b = ins[0][0], ins[1][0]
        if attrs.get("trans_a"):
            a = a.T
        if attrs.get("trans_b"):
            b = b.T
        return [np.dot(a, b)]
    if kind == "elementwise":
        fn = attrs.get("fn", "add")
        vals = [x for x, _ in ins]
        out = vals[0]
        for x in vals[1:]:
            if fn == "add":
                out = out + x
            elif fn == "sub":
                out = out - x
            elif fn == "mul":
                out = out * x
            elif fn == "max":
                out = np.maximum(out, x)
            else:
                raise UnsupportedOpError([f"elementwise:{fn}"])
        return [np.array(out, dtype=object)]
    if kind == "reduce-op":
        x = ins[0][0]
        dim = attrs.get("dim", x.ndim - 1)
        return [np.array(x.sum(axis=dim), dtype=object).reshape(out_masks[0].shape)]
    if kind == "embedding-lookup":
        ids, table = ins[0][0], ins[1][0]
        lo = ins[1][1].region[0][0]
        out = np.zeros(ids.shape + (table.shape[1],), dtype=object)
        rel = np.vectorize(int, otypes=[np.int64])(ids) - lo if ids.size else ids
        hit = (rel >= 0) & (rel < table.shape[0])
        if hit.any():
            out[hit] = table[rel[hit]]
        return [out]
    if kind == "identity":
        return [ins[0][0].copy()]
    raise UnsupportedOpError([kind])


def random_inputs(g: PlanGraph, seed: int = 0, low: int = -3, high: int = 4) -> Dict[str, np.ndarray]:
    """Small random integers for every graph input; embedding ids stay in range."""
    rng = np.random.default_rng(seed)
    vocab: Dict[str, int] = {}
    for op in g.ops.values():
        if op.kind == "embedding-lookup":
            ids = g.vtensors[op.inputs[0]].ptensor
            table = g.vtensors[op.inputs[1]].ptensor
            vocab[ids] = g.ptensors[table].shape[0]
    out = {}
    for pid in sorted(g.input_ptensors()):
        shape = g.ptensors[pid].shape
        if pid in vocab:
            out[pid] = _obj(rng.integers(0, vocab[pid], size=shape))
        else:
            out[pid] = _obj(rng.integers(low, high, size=shape))
    return out


def _slice(arr: np.ndarray, region: Region, origin: Region) -> np.ndarray:
    return arr[region_slices(region, origin)]


def run_reference(g: PlanGraph, inputs: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """Sequential execution of an unpartitioned graph (every mask full)."""
    bad = unsupported_kinds(g)
    if bad:
        raise UnsupportedOpError(bad)
    values = {k: _obj(v) for k, v in inputs.items()}
    edges = set()
    producer = {}
    for op in g.ops.values():
        for v in op.outputs:
            producer[g.vtensors[v].ptensor] = op.id
    for op in g.ops.values():
        for v in op.inputs:
            p = producer.get(g.vtensors[v].ptensor)
            if p is not None and p != op.id:
                edges.add((p, op.id))
    for op_id in topo_sort(g, edges):
        op = g.ops[op_id]
        ins = []
        for v in op.inputs:
            vt = g.vtensors[v]
            if vt.ptensor not in values:
                raise ExecutionError(f"op {op_id}: input {vt.ptensor} has no value")
            shape = g.ptensors[vt.ptensor].shape
            ins.append((_slice(values[vt.ptensor], vt.region, full_region(shape)), vt.mask))
        outs = kernel(op, ins, [g.vtensors[v].mask for v in op.outputs])
        for v, val in zip(op.outputs, outs):
            values[g.vtensors[v].ptensor] = val
    return {p: values[p] for p in g.produced_ptensors()}


class _Blocked(Exception):
    pass


def run_plan(g: PlanGraph, inputs: Dict[str, np.ndarray], trace: Optional[list] = None
             ) -> Dict[str, np.ndarray]:
    """Execute a materialized plan: one sequential context per device, round-robin."""
    if not g.materialized or g.sequence is None:
        raise ExecutionError("run_plan needs a materialized, ordered graph")
    bad = unsupported_kinds(g)
    if bad:
        raise UnsupportedOpError(bad)
    inputs = {k: _obj(v) for k, v in inputs.items()}
    lanes = g.device_orders()
    pc = dict.fromkeys(lanes, 0)
    buffers: Dict[str, np.ndarray] = {}
    freed: set = set()
    mailbox: Dict[str, np.ndarray] = {}
    posted: Dict[str, Dict[int, Tuple[np.ndarray, Region]]] = {}
    produced: List[Tuple[str, np.ndarray]] = []

    def read(vid: str) -> np.ndarray:
        bound = g.bindings.get(vid)
        vt = g.vtensors[vid]
        if bound is None:
            if vt.ptensor not in inputs:
                raise ExecutionError(f"{vid}: unbound read of produced tensor {vt.ptensor}")
            shape = g.ptensors[vt.ptensor].shape
            return _slice(inputs[vt.ptensor], vt.region, full_region(shape))
        if bound in freed:
            raise ExecutionError(f"{vid}: reads freed buffer {bound}")
        if bound not in buffers:
            raise ExecutionError(f"{vid}: buffer {bound} not yet written")
        src = g.vtensors[bound]
        if src.region != vt.region:
            raise ExecutionError(f"{vid}: mask {vt.mask} bound to buffer with {src.mask}")
        return buffers[bound]

    def step(dev: int, op: OpNode) -> None:
        kind = op.kind
        if kind == "recv":
            piece = op.attrs["piece"]
            if piece not in mailbox:
                raise _Blocked
            buffers[op.outputs[0]] = mailbox.pop(piece)
            return
        if kind == "collective":
            cid = op.attrs["collective_id"]
            box = posted.setdefault(cid, {})
            if op.inputs and dev not in box:
                box[dev] = (read(op.inputs[0]), g.vtensors[op.inputs[0]].region)
            if op.outputs:
                need = {s for s, _ in op.attrs["sources"]}
                if not need <= set(box):
                    raise _Blocked
                out_vt = g.vtensors[op.outputs[0]]
                out = np.zeros(out_vt.mask.shape, dtype=object)
                for s, region in op.attrs["sources"]:
                    region = tuple(tuple(r) for r in region)
                    val, origin = box[s]
                    out[region_slices(region, out_vt.region)] += _slice(val, region, origin)
                buffers[op.outputs[0]] = out
            return
        if kind == "send":
            if op.attrs["piece"] in mailbox:
                raise ExecutionError(f"duplicate send of {op.attrs['piece']}")
            mailbox[op.attrs["piece"]] = read(op.inputs[0]).copy()
            return
        if kind == "free":
            bound = g.bindings.get(op.inputs[0])
            if bound is not None:
                freed.add(bound)
                buffers.pop(bound, None)
            return
        if kind == "split":
            src = g.vtensors[op.inputs[0]]
            dst = g.vtensors[op.outputs[0]]
            buffers[op.outputs[0]] = _slice(read(op.inputs[0]), dst.region, src.region).copy()
            return
        if kind in ("concat", "reduce-assemble"):
            dst = g.vtensors[op.outputs[0]]
            out = np.zeros(dst.mask.shape, dtype=object)
            for vid in op.inputs:
                out[region_slices(g.vtensors[vid].region, dst.region)] += read(vid)
            buffers[op.outputs[0]] = out
            return
        ins = [(read(v), g.vtensors[v].mask) for v in op.inputs]
        outs = kernel(op, ins, [g.vtensors[v].mask for v in op.outputs])
        for v, val in zip(op.outputs, outs):
            if val.shape != g.vtensors[v].mask.shape:
                raise ExecutionError(f"op {op.id}: output shape {val.shape} != mask "
                                     f"{g.vtensors[v].mask.shape}")
            buffers[v] = val
            produced.append((v, val))

    remaining = sum(len(l) for l in lanes.values())
    while remaining:
        progress = False
        for dev, lane in lanes.items():
            while pc[dev] < len(lane):
                op = g.ops[lane[pc[dev]]]
                try:
                    step(dev, op)
                except _Blocked:
                    break
                if trace is not None:
                    trace.append((dev, op.id))
                pc[dev] += 1
                remaining -= 1
                progress = True
        if not progress:
            waiting = {d: lane[pc[d]] for d, lane in lanes.items() if pc[d] < len(lane)}
            raise ExecutionError(f"plan deadlocked, waiting: {waiting}")
    if mailbox:
        raise ExecutionError(f"unmatched sends: {sorted(mailbox)}")
    return reconstruct(g, produced)


def reconstruct(g: PlanGraph, produced: List[Tuple[str, np.ndarray]]) -> Dict[str, np.ndarray]:
    """Reassemble every produced pTensor: replicas must agree, value parts sum."""
    parts: Dict[str, Dict[tuple, Tuple[np.ndarray, np.ndarray]]] = {}
    for vid, val in produced:
        vt = g.vtensors[vid]
        shape = g.ptensors[vt.ptensor].shape
        slot = parts.setdefault(vt.ptensor, {})
        if vt.mask.value not in slot:
            slot[vt.mask.value] = (np.zeros(shape, dtype=object), np.zeros(shape, dtype=bool))
        acc, seen = slot[vt.mask.value]
        sl = region_slices(vt.region)
        old, had = acc[sl], seen[sl]
        if np.any(had & (old != val)):
            raise ExecutionError(f"replicas of {vt.ptensor} {vt.mask} disagree")
        acc[sl] = np.where(had, old, val)
        seen[sl] = True
    out = {}
    for pid, slot in parts.items():
        full = np.zeros(g.ptensors[pid].shape, dtype=object)
        for acc, _ in slot.values():
            full += acc
        out[pid] = full
    return out


def compare(ref: Dict[str, np.ndarray], got: Dict[str, np.ndarray]):
    """First mismatch as (tensor id, index tuple) or None; missing tensors index ()."""
    for pid in sorted(ref):
        if pid not in got:
            return (pid, ())
        a, b = np.asarray(ref[pid]), np.asarray(got[pid])
        if a.shape != b.shape:
            return (pid, ())
        diff = np.argwhere(a != b)
        if len(diff):
            return (pid, tuple(int(i) for i in diff[0]))
    return None

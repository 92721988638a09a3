"""Built-in plan programs written against op-trans / op-assign / op-order."""

from __future__ import annotations

import importlib
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from .errors import PlanError, StrategyError
from .graph import PlanGraph
from .schedule import derive_data_deps, op_assign, op_order, topo_sort
from .transform import (LabelSplitAlgo, ReplicaAlgo, SplitAlgo, TransformAlgo,
                        adapt_backward, mark_recompute, op_labels, op_trans, paired_backward)

log = logging.getLogger(__name__)


@dataclass
class StrategyConfig:
    name: str
    ndevs: int = 1
    K: int = 1
    S: Optional[int] = None
    shards: int = 1
    params: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        for key in ("ndevs", "K", "shards"):
            val = getattr(self, key)
            if not isinstance(val, int) or val < 1:
                raise StrategyError(f"strategy parameter {key} must be an integer >= 1, got {val!r}")
        if self.S is not None and (not isinstance(self.S, int) or self.S < 1):
            raise StrategyError(f"strategy parameter S must be an integer >= 1, got {self.S!r}")

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "StrategyConfig":
        if not isinstance(doc, dict) or "name" not in doc:
            raise StrategyError("strategy document needs a 'name'")
        known = {"name", "ndevs", "K", "S", "shards", "params"}
        extra = sorted(set(doc) - known)
        if extra:
            raise StrategyError(f"unknown strategy fields: {', '.join(extra)}")
        return cls(doc["name"], doc.get("ndevs", 1), doc.get("K", 1), doc.get("S"),
                   doc.get("shards", 1), dict(doc.get("params") or {}))

    def to_dict(self) -> Dict[str, Any]:
        d = {"name": self.name, "ndevs": self.ndevs, "K": self.K, "shards": self.shards}
        if self.S is not None:
            d["S"] = self.S
        if self.params:
            d["params"] = self.params
        return d


# ---------------------------------------------------------------------------
# helpers


def forward_roots(g: PlanGraph) -> List[str]:
    ops = [o for o in g.ops.values() if o.direction == "forward" and o.recompute_of is None]
    return [o.id for o in sorted(ops, key=lambda o: (o.order, o.id))]


def split_op(g: PlanGraph, op_id: str, algo: TransformAlgo) -> List[str]:
    """op-trans, carrying paired backward ops along when the graph declares them."""
    if paired_backward(g, op_id):
        return adapt_backward(g, op_id, algo)
    return op_trans(g, op_id, algo)


def batch_algo(g: PlanGraph, op_id: str, n: int) -> SplitAlgo:
    bd = g.op(op_id).attrs.get("batch_dim")
    if bd is None:
        raise StrategyError(f"op {op_id} has no batch_dim annotation")
    return SplitAlgo(int(bd[1]), n, operand=int(bd[0]))


def assign_with_backward(g: PlanGraph, op_id: str, device: int) -> None:
    op_assign(g, op_id, device)
    for b in paired_backward(g, op_id):
        op_assign(g, b, device)


def replicate_rest(g: PlanGraph, devices: Sequence[int]) -> None:
    """Replicate every still-unassigned op across ``devices``."""
    for op_id in [o for o in sorted(g.ops) if o not in g.assignment]:
        new = op_trans(g, op_id, ReplicaAlgo(len(devices)))
        for nid, dev in zip(new, devices):
            op_assign(g, nid, dev)


def data_order(g: PlanGraph) -> Dict[str, int]:
    """Position of every op in a deterministic topological order of data and
    happen-before edges."""
    edges = {(e.producer, e.consumer) for e in derive_data_deps(g)} | set(g.happen_before)
    return {o: i for i, o in enumerate(topo_sort(g, edges))}


def chain(g: PlanGraph, ops: Sequence[str]) -> None:
    for a, b in zip(ops, ops[1:]):
        op_order(g, a, b)


def order_all(g: PlanGraph, before: Sequence[str], after: Sequence[str]) -> None:
    for a in before:
        for b in after:
            if a != b:
                op_order(g, a, b)


def apply_extra_order(g: PlanGraph, cfg: StrategyConfig) -> None:
    for a, b in cfg.params.get("order", []):
        op_order(g, a, b)


# ---------------------------------------------------------------------------
# data / tensor parallelism


def plan_data_parallel(g: PlanGraph, cfg: StrategyConfig) -> PlanGraph:
    """Split forward ops on their batch dim, replicate the rest, assign by rank."""
    n = cfg.ndevs
    roots = forward_roots(g)
    for op_id in roots:
        if "batch_dim" not in g.ops[op_id].attrs:
            raise StrategyError(f"data parallelism: op {op_id} has no batch_dim annotation")
    if n > 1:
        for op_id in roots:
            for rank, nid in enumerate(split_op(g, op_id, batch_algo(g, op_id, n))):
                assign_with_backward(g, nid, rank)
    replicate_rest(g, list(range(n)))
    return g


def _weight_operand(g: PlanGraph, op_id: str) -> Optional[int]:
    for k, v in enumerate(g.ops[op_id].inputs):
        if g.ptensors[g.vtensors[v].ptensor].kind == "weight":
            return k
    return None


def plan_tensor_parallel(g: PlanGraph, cfg: StrategyConfig) -> PlanGraph:
    """Alternate column / row splits of matmul weights; replicate other ops."""
    n = cfg.ndevs
    weight_dim: Dict[str, int] = {}
    column = True
    if n > 1:
        for op_id in forward_roots(g):
            op = g.ops[op_id]
            wk = _weight_operand(g, op_id) if op.kind == "matmul" else None
            algo: TransformAlgo = ReplicaAlgo(n)
            if wk is not None:
                labels = op_labels(g, op)
                wl = labels.inputs[wk]
                outs = {lab for o in labels.outputs for lab in o}
                pick = [lab for lab in wl if (lab in outs) == column]
                if pick:
                    cand = LabelSplitAlgo(pick[0], n)
                    if cand.applicable(g, op):
                        algo = cand
                        weight_dim[g.vtensors[op.inputs[wk]].ptensor] = wl.index(pick[0])
                        column = not column
            for rank, nid in enumerate(split_op(g, op_id, algo)):
                assign_with_backward(g, nid, rank)
        for op in sorted([o for o in g.ops.values() if o.direction == "optimizer"],
                         key=lambda o: o.id):
            if op.id in g.assignment:
                continue
            wk = _weight_operand(g, op.id)
            pid = g.vtensors[op.inputs[wk]].ptensor if wk is not None else None
            algo = ReplicaAlgo(n)
            if pid in weight_dim:
                cand = SplitAlgo(weight_dim[pid], n, operand=wk)
                if cand.applicable(g, op):
                    algo = cand
            for rank, nid in enumerate(op_trans(g, op.id, algo)):
                op_assign(g, nid, rank)
    replicate_rest(g, list(range(n)))
    return g


# ---------------------------------------------------------------------------
# co-shard


def coshard(g: PlanGraph, targets: Sequence[str], n: int, recompute: bool = True,
            default_device: int = 0) -> List[str]:
    """Shard each target n ways on one device, serialized shard by shard.

    Returns the op chain that was ordered."""
    for t in targets:
        if "shard_dim" not in g.op(t).attrs:
            raise StrategyError(f"co-shard: op {t} has no shard_dim annotation")
    if n == 1:
        for t in targets:
            if t not in g.assignment:
                assign_with_backward(g, t, default_device)
        return []
    shards: Dict[str, List[str]] = {}
    devices: Dict[str, int] = {}
    for t in targets:
        op = g.ops[t]
        operand, dim = op.attrs["shard_dim"]
        label = op_labels(g, op).inputs[operand][dim]
        devices[t] = g.assignment.pop(t, default_device)
        for b in paired_backward(g, t):
            g.assignment.pop(b, None)
        shards[t] = split_op(g, t, LabelSplitAlgo(label, n))
        for nid in shards[t]:
            assign_with_backward(g, nid, devices[t])
    fwd = [shards[t][i] for i in range(n) for t in targets]
    backward_pts = {g.vtensors[v].ptensor for op in g.ops.values()
                    if op.direction == "backward" for v in op.inputs}
    clones: Dict[Tuple[str, int], str] = {}
    if recompute:
        for t in targets:
            for i, sid in enumerate(shards[t]):
                if any(g.vtensors[v].ptensor in backward_pts for v in g.ops[sid].outputs):
                    clones[(t, i)] = mark_recompute(g, sid)
                    op_assign(g, clones[(t, i)], devices[t])
    pos = data_order(g)
    bwd: List[str] = []
    for i in range(n):
        bwd += [clones[(t, i)] for t in targets if (t, i) in clones]
        for t in reversed(targets):
            bwd += sorted(paired_backward(g, shards[t][i]), key=pos.__getitem__)
    seq = fwd + bwd
    chain(g, seq)
    return seq


def plan_coshard(g: PlanGraph, cfg: StrategyConfig) -> PlanGraph:
    targets = cfg.params.get("ops") or [o for o in forward_roots(g)
                                        if "shard_dim" in g.ops[o].attrs]
    if not targets:
        raise StrategyError("co-shard: no target ops (annotation missing)")
    dev = int(cfg.params.get("device", 0))
    coshard(g, targets, cfg.shards, bool(cfg.params.get("recompute", True)), dev)
    for op_id in sorted(g.ops):
        if op_id not in g.assignment:
            op_assign(g, op_id, dev)
    return g


def plan_single(g: PlanGraph, cfg: StrategyConfig) -> PlanGraph:
    dev = int(cfg.params.get("device", 0))
    for op_id in sorted(g.ops):
        op_assign(g, op_id, dev)
    return g


# ---------------------------------------------------------------------------
# pipelines

Block = Tuple[int, int, str]  # (stage, micro-batch, phase)


def stage_of(g: PlanGraph, op_id: str, S: int, groups: Optional[Sequence[Sequence[int]]] = None
             ) -> int:
    """Stage of an op from its ``stage`` or ``layer`` attribute.

    Layers are spread over S contiguous groups unless ``groups`` lists them."""
    op = g.ops[op_id]
    attrs = op.attrs
    if "stage" not in attrs and "layer" not in attrs:
        for f in op.backward_of:
            if f in g.ops:
                return stage_of(g, f, S, groups)
        if op.recompute_of in g.ops:
            return stage_of(g, op.recompute_of, S, groups)
        # e.g. an optimizer op follows the op producing its gradient
        for vid in op.inputs:
            for vt in sorted(g.producers_of(g.vtensors[vid].ptensor), key=lambda v: v.id):
                if vt.owner != op_id:
                    return stage_of(g, vt.owner, S, groups)
        raise StrategyError(f"pipeline: op {op_id} has neither stage nor layer attribute")
    if "stage" in attrs:
        st = int(attrs["stage"])
    else:
        layer = int(attrs["layer"])
        if groups:
            hits = [i for i, grp in enumerate(groups) if layer in grp]
            if not hits:
                raise StrategyError(f"pipeline: layer {layer} is in no stage group")
            st = hits[0]
        else:
            layers = sorted({int(o.attrs["layer"]) for o in g.ops.values() if "layer" in o.attrs})
            if S > len(layers):
                raise StrategyError(f"pipeline: {S} stages but only {len(layers)} layers")
            base, extra = divmod(len(layers), S)
            bounds, at = [], 0
            for s in range(S):
                at += base + (1 if s < extra else 0)
                bounds.append(at)
            idx = layers.index(layer)
            st = next(s for s, b in enumerate(bounds) if idx < b)
    if not 0 <= st < S:
        raise StrategyError(f"pipeline: op {op_id} maps to stage {st}, outside 0..{S - 1}")
    return st


def split_microbatches(g: PlanGraph, K: int, skip: Sequence[str] = ()) -> None:
    """Split every forward op K ways on its batch dim and tag micro-batch indices."""
    for op_id in forward_roots(g):
        if op_id in skip:
            continue
        new = split_op(g, op_id, batch_algo(g, op_id, K)) if K > 1 else [op_id]
        for i, nid in enumerate(new):
            g.ops[nid].micro_batch = i
            for b in paired_backward(g, nid):
                g.ops[b].micro_batch = i


def phase_of(op) -> str:
    if op.direction == "backward" or op.recompute_of is not None:
        return "B"
    p = op.attrs.get("pass")
    return f"F{p}" if p is not None else "F"


def collect_blocks(g: PlanGraph, stage: Dict[str, int], ops: Sequence[str]
                   ) -> Dict[Block, List[str]]:
    pos = data_order(g)
    blocks: Dict[Block, List[str]] = {}
    for op_id in ops:
        op = g.ops[op_id]
        if op.micro_batch is None:
            continue
        blocks.setdefault((stage[op_id], op.micro_batch, phase_of(op)), []).append(op_id)
    for b in blocks.values():
        b.sort(key=pos.__getitem__)
    return blocks


def gpipe_sequence(S: int, K: int, s: int) -> List[Tuple[int, str]]:
    return [(i, "F") for i in range(K)] + [(i, "B") for i in range(K)]


def one_f_one_b_sequence(S: int, K: int, s: int) -> List[Tuple[int, str]]:
    warm = min(S - s - 1, K)
    seq = [(i, "F") for i in range(warm)]
    f, b = warm, 0
    while b < K:
        if f < K:
            seq.append((f, "F"))
            f += 1
        seq.append((b, "B"))
        b += 1
    return seq


def unit_slots(S: int, K: int, seqs: Dict[int, List[Tuple[int, str]]]) -> List[List[Block]]:
    """Unit-time execution of per-stage F/B sequences; blocks grouped by start slot."""
    start: Dict[Block, int] = {}
    ptr = dict.fromkeys(range(S), 0)
    free = dict.fromkeys(range(S), 0)
    total = sum(len(v) for v in seqs.values())
    while len(start) < total:
        moved = False
        for s in range(S):
            while ptr[s] < len(seqs[s]):
                mb, ph = seqs[s][ptr[s]]
                if ph == "F":
                    dep = (s - 1, mb, "F") if s > 0 else None
                else:
                    dep = (s + 1, mb, "B") if s < S - 1 else (s, mb, "F")
                if dep is not None and dep not in start:
                    break
                t = max(free[s], start[dep] + 1 if dep else 0)
                start[(s, mb, ph)] = t
                free[s] = t + 1
                ptr[s] += 1
                moved = True
        if not moved:
            raise StrategyError("pipeline sequence has a circular stage dependency")
    slots: List[List[Block]] = [[] for _ in range(max(start.values()) + 1)]
    for blk, t in sorted(start.items(), key=lambda kv: (kv[1], kv[0])):
        slots[t].append(blk)
    return slots


def _order_stages(g: PlanGraph, blocks: Dict[Block, List[str]], S: int,
                  seqs: Dict[int, List[Tuple[int, str]]], tail: Dict[int, List[str]]) -> None:
    """Chain each device's ops following its stage's block sequence."""
    lanes: Dict[int, List[str]] = {}
    for s in range(S):
        for mb, ph in seqs[s]:
            for op_id in blocks.get((s, mb, ph), []):
                lanes.setdefault(g.assignment[op_id], []).append(op_id)
        for op_id in tail.get(s, []):
            lanes.setdefault(g.assignment[op_id], []).append(op_id)
    for lane in lanes.values():
        chain(g, lane)


def _stage_groups(cfg: StrategyConfig):
    groups = cfg.params.get("stages")
    return [list(grp) for grp in groups] if groups else None


def plan_pipeline(g: PlanGraph, cfg: StrategyConfig, schedule: str = "1f1b",
                  inner: Optional[str] = None, dp: int = 1) -> PlanGraph:
    """GPipe or 1F1B pipeline; optional data parallelism or co-shard inside each stage."""
    S = cfg.S or max(1, cfg.ndevs // dp)
    K = cfg.K
    groups = _stage_groups(cfg)
    stage = {o: stage_of(g, o, S, groups) for o in g.ops}
    split_microbatches(g, K)
    for o in g.ops:
        if o not in stage:
            stage[o] = stage_of(g, o, S, groups)
    if inner == "dp" and dp > 1:
        for op_id in forward_roots(g):
            s = stage[op_id]
            for r, nid in enumerate(split_op(g, op_id, batch_algo(g, op_id, dp))):
                assign_with_backward(g, nid, s * dp + r)
        for op_id in sorted(g.ops):
            if op_id not in g.assignment:
                s = stage_of(g, op_id, S, groups)
                new = op_trans(g, op_id, ReplicaAlgo(dp))
                for r, nid in enumerate(new):
                    op_assign(g, nid, s * dp + r)
    else:
        for op_id in sorted(g.ops):
            op_assign(g, op_id, stage[op_id] * dp)
    if inner == "coshard":
        targets = [o for o in forward_roots(g) if "shard_dim" in g.ops[o].attrs]
        if not targets:
            raise StrategyError("co-shard: no target ops (annotation missing)")
        by_group: Dict[Tuple[int, int], List[str]] = {}
        for t in targets:
            by_group.setdefault((g.ops[t].micro_batch or 0, g.assignment[t]), []).append(t)
        for key in sorted(by_group):
            coshard(g, by_group[key], cfg.shards, bool(cfg.params.get("recompute", True)))
    stage = {o: stage_of(g, o, S, groups) for o in g.ops}
    make = gpipe_sequence if schedule == "gpipe" else one_f_one_b_sequence
    seqs = {s: make(S, K, s) for s in range(S)}
    blocks = collect_blocks(g, stage, sorted(g.ops))
    pos = data_order(g)
    tail: Dict[int, List[str]] = {}
    for o in sorted(g.ops, key=pos.__getitem__):
        if g.ops[o].micro_batch is None:
            tail.setdefault(stage[o], []).append(o)
    _order_stages(g, blocks, S, seqs, tail)
    return g


def plan_gpipe(g, cfg):
    return plan_pipeline(g, cfg, "gpipe")


def plan_1f1b(g, cfg):
    return plan_pipeline(g, cfg, "1f1b")


def plan_hybrid(g, cfg):
    """Pipeline across stages, data parallel (or co-shard) within each stage."""
    inner = cfg.params.get("inner", "dp")
    if inner not in ("dp", "coshard"):
        raise StrategyError(f"hybrid: unknown inner strategy {inner!r}")
    dp = int(cfg.params.get("dp", 2)) if inner == "dp" else 1
    if cfg.S is None:
        raise StrategyError("hybrid: S (stage count) is required")
    if inner == "dp" and cfg.S * dp != cfg.ndevs:
        raise StrategyError(f"hybrid: S*dp = {cfg.S * dp} does not match ndevs = {cfg.ndevs}")
    return plan_pipeline(g, cfg, cfg.params.get("schedule", "1f1b"), inner, dp)


# ---------------------------------------------------------------------------
# interlaced pipeline


def _is_embedding(g: PlanGraph, op_id: str) -> bool:
    op = g.ops[op_id]
    if op.attrs.get("role") == "embedding":
        return True
    return any(g.ops[f].attrs.get("role") == "embedding" for f in op.backward_of if f in g.ops)


def plan_interlaced(g: PlanGraph, cfg: StrategyConfig) -> PlanGraph:
    """1F1B over the stage ops with vocabulary-sharded embedding work on every device.

    Embedding lookups run as barriers after every second time slot, covering the
    micro-batches whose first stage starts in the next two slots. Ops reading the
    pipeline output through the table join the slot of the last stage's forward."""
    S = cfg.S or cfg.ndevs
    K = cfg.K
    if cfg.ndevs < S:
        raise StrategyError(f"interlaced: {S} stages need {S} devices, got {cfg.ndevs}")
    groups = _stage_groups(cfg)
    split_microbatches(g, K)
    emb = {o for o in g.ops if _is_embedding(g, o)}
    stage = {o: stage_of(g, o, S, groups) for o in g.ops if o not in emb}
    for op_id in forward_roots(g):
        if op_id not in emb:
            continue
        op = g.ops[op_id]
        wk = _weight_operand(g, op_id)
        if wk is None:
            raise StrategyError(f"interlaced: embedding op {op_id} has no table operand")
        label = op_labels(g, op).inputs[wk][0]
        for j, nid in enumerate(split_op(g, op_id, LabelSplitAlgo(label, S))):
            assign_with_backward(g, nid, j)
    emb = {o for o in g.ops if _is_embedding(g, o)}
    for op_id in sorted(g.ops):
        if op_id not in emb:
            op_assign(g, op_id, stage[op_id])
    seqs = {s: one_f_one_b_sequence(S, K, s) for s in range(S)}
    slots = unit_slots(S, K, seqs)
    g.meta["interlaced_steps"] = len(slots)
    pos = data_order(g)
    blocks = collect_blocks(g, stage, [o for o in g.ops if o not in emb])
    slot_of = {blk: t for t, blks in enumerate(slots) for blk in blks}
    lookups: Dict[int, List[str]] = {}
    slot_ops: List[List[str]] = [[o for blk in blks for o in blocks.get(blk, [])] for blks in slots]
    for o in sorted(emb, key=pos.__getitem__):
        mb = g.ops[o].micro_batch or 0
        if g.ops[o].kind == "embedding-lookup":
            lookups.setdefault(mb, []).append(o)
        else:
            slot_ops[slot_of[(S - 1, mb, "F")]].append(o)
    for ops in slot_ops:
        ops.sort(key=pos.__getitem__)
    first = {mb: slot_of[(0, mb, "F")] + 1 for mb in range(K)}

    def embed_tasks(step: int) -> List[str]:
        return [o for mb in range(K) if step < first[mb] <= step + 2 for o in lookups.get(mb, [])]

    previous = embed_tasks(0)
    for step in range(1, len(slots) + 1):
        stage_tasks = slot_ops[step - 1]
        order_all(g, previous, stage_tasks)
        previous = stage_tasks or previous
        if step % 2 == 0:
            et = embed_tasks(step)
            order_all(g, stage_tasks, et)
            previous = et or previous
    tail = [o for o in sorted(g.ops, key=pos.__getitem__)
            if o not in emb and g.ops[o].micro_batch is None]
    for o in tail:
        order_all(g, previous, [o])
    return g


# ---------------------------------------------------------------------------
# three forward passes, one backward

_PRIORITY = {"B": 0, "F3": 1, "F2": 2, "F1": 3}


def _three_pass_dep(S: int, s: int, mb: int, ph: str) -> Optional[Block]:
    if ph == "B":
        return (s + 1, mb, "B") if s < S - 1 else (S - 1, mb, "F3")
    if s > 0:
        return (s - 1, mb, ph)
    if ph == "F1":
        return None
    return (S - 1, mb, f"F{int(ph[1]) - 1}")


def three_pass_sequences(S: int, K: int, dur: Dict[Block, float]) -> Dict[int, List[Tuple[int, str]]]:
    """Non-delay list scheduling: backward > F3 > F2 > F1, then lower micro-batch."""
    pending = {s: {(mb, ph) for mb in range(K) for ph in _PRIORITY} for s in range(S)}
    done: Dict[Block, float] = {}
    free = dict.fromkeys(range(S), 0.0)
    seqs: Dict[int, List[Tuple[int, str]]] = {s: [] for s in range(S)}
    while any(pending.values()):
        best = None
        for s in range(S):
            ready = []
            for mb, ph in pending[s]:
                dep = _three_pass_dep(S, s, mb, ph)
                if dep is None:
                    ready.append((free[s], mb, ph))
                elif dep in done:
                    ready.append((max(free[s], done[dep]), mb, ph))
            if not ready:
                continue
            start = min(r[0] for r in ready)
            pick = min((r for r in ready if r[0] <= start),
                       key=lambda r: (_PRIORITY[r[2]], r[1]))
            if best is None or (start, s) < (best[0], best[1]):
                best = (start, s, pick[1], pick[2])
        if best is None:
            raise StrategyError("3F1B: no runnable task")
        start, s, mb, ph = best
        done[(s, mb, ph)] = start + dur.get((s, mb, ph), 0.0)
        free[s] = done[(s, mb, ph)]
        pending[s].discard((mb, ph))
        seqs[s].append((mb, ph))
    return seqs


def sequential_pass_sequences(S: int, K: int) -> Dict[int, List[Tuple[int, str]]]:
    """Baseline: the three passes as back-to-back pipelines."""
    out = {}
    for s in range(S):
        seq = [(i, "F1") for i in range(K)] + [(i, "F2") for i in range(K)]
        seq += [(mb, "F3" if ph == "F" else "B") for mb, ph in one_f_one_b_sequence(S, K, s)]
        out[s] = seq
    return out


def plan_3f1b(g: PlanGraph, cfg: StrategyConfig, sequential: bool = False) -> PlanGraph:
    S = cfg.S or cfg.ndevs
    K = cfg.K
    roots = forward_roots(g)
    passes = {g.ops[o].attrs.get("pass") for o in roots}
    if not roots or passes != {1, 2, 3}:
        raise StrategyError("3F1B needs forward ops tagged with pass 1, 2 and 3")
    for op in g.ops.values():
        if op.direction == "backward" and any(g.ops[f].attrs.get("pass") != 3
                                              for f in op.backward_of if f in g.ops):
            raise StrategyError(f"3F1B: backward op {op.id} does not pair with the third pass")
    groups = _stage_groups(cfg)
    split_microbatches(g, K)
    stage = {o: stage_of(g, o, S, groups) for o in g.ops}
    for op_id in sorted(g.ops):
        op_assign(g, op_id, stage[op_id])
    blocks = collect_blocks(g, stage, sorted(g.ops))
    dur = {blk: float(sum(g.ops[o].flops for o in ops)) for blk, ops in blocks.items()}
    seqs = sequential_pass_sequences(S, K) if sequential else three_pass_sequences(S, K, dur)
    pos = data_order(g)
    tail: Dict[int, List[str]] = {}
    for o in sorted(g.ops, key=pos.__getitem__):
        if g.ops[o].micro_batch is None:
            tail.setdefault(stage[o], []).append(o)
    _order_stages(g, blocks, S, seqs, tail)
    if sequential:
        # each pass drains from the whole pipeline before the next one starts
        for p in (1, 2):
            lasts = [blocks[(s, K - 1, f"F{p}")][-1] for s in range(S) if (s, K - 1, f"F{p}") in blocks]
            firsts = [blocks[(s, 0, f"F{p + 1}")][0] for s in range(S) if (s, 0, f"F{p + 1}") in blocks]
            order_all(g, lasts, firsts)
    g.meta["stage_tasks"] = {str(s): [f"{ph}.{mb}" for mb, ph in seqs[s]] for s in range(S)}
    return g


# ---------------------------------------------------------------------------
# registry

StrategyFn = Callable[[PlanGraph, StrategyConfig], Optional[PlanGraph]]

STRATEGIES: Dict[str, StrategyFn] = {
    "single": plan_single,
    "dp": plan_data_parallel,
    "tp": plan_tensor_parallel,
    "gpipe": plan_gpipe,
    "1f1b": plan_1f1b,
    "hybrid": plan_hybrid,
    "coshard": plan_coshard,
    "interlaced": plan_interlaced,
    "3f1b": plan_3f1b,
    "3f1b-sequential": lambda g, cfg: plan_3f1b(g, cfg, sequential=True),
}


def resolve_strategy(name: str) -> StrategyFn:
    if name in STRATEGIES:
        return STRATEGIES[name]
    if ":" in name:
        mod, _, attr = name.partition(":")
        try:
            fn = getattr(importlib.import_module(mod), attr)
        except (ImportError, AttributeError) as exc:
            raise StrategyError(f"cannot load strategy {name!r}: {exc}") from exc
        return fn
    raise StrategyError(f"unknown strategy {name!r}; built-ins: {', '.join(sorted(STRATEGIES))}")


def apply_strategy(g: PlanGraph, cfg: StrategyConfig) -> PlanGraph:
    fn = resolve_strategy(cfg.name)
    try:
        out = fn(g, cfg)
    except PlanError:
        raise
    except (KeyError, ValueError, TypeError) as exc:
        raise StrategyError(f"strategy {cfg.name!r} failed: {exc}") from exc
    g = out if out is not None else g
    apply_extra_order(g, cfg)
    missing = sorted(o for o in g.ops if o not in g.assignment)
    if missing:
        raise StrategyError(f"strategy {cfg.name!r} left ops unassigned: {', '.join(missing[:5])}")
    return g

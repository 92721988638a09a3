"""Operator transformation: functional-equivalence rewrites with view tracking.

Every operand dimension of an operator carries a *label*.  Dimensions that
share a label are partitioned together.  Splitting a label that survives into
the output yields spatial sub-operators; splitting a contracted label yields
partial-value outputs whose sum reconstructs the original.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Set, Tuple, Union

from .errors import TransformError
from .graph import Mask, OpNode, PlanGraph

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# partition specs


@dataclass(frozen=True)
class DimSlice:
    dim: int
    index: int
    count: int


@dataclass(frozen=True)
class ValueSlice:
    index: int
    count: int


@dataclass(frozen=True)
class Replica:
    index: int
    count: int


PartitionSpec = Union[DimSlice, ValueSlice, Replica]


def compose_mask(current: Mask, spec: PartitionSpec) -> Mask:
    """Refine ``current`` by ``spec``; counts compose mixed-radix."""
    if not 0 <= spec.index < spec.count:
        raise TransformError(f"bad partition index {spec}")
    if isinstance(spec, DimSlice):
        if not 0 <= spec.dim < len(current.region):
            raise TransformError(f"dim {spec.dim} out of range for {current}")
        lo, hi = current.region[spec.dim]
        if (hi - lo) % spec.count:
            raise TransformError(
                f"interval [{lo},{hi}) of dim {spec.dim} not divisible by {spec.count}")
        step = (hi - lo) // spec.count
        region = list(current.region)
        region[spec.dim] = (lo + spec.index * step, lo + (spec.index + 1) * step)
        return Mask(tuple(region), current.value, current.replica)
    if isinstance(spec, ValueSlice):
        idx, cnt = current.value
        return Mask(current.region, (idx * spec.count + spec.index, cnt * spec.count),
                    current.replica)
    if isinstance(spec, Replica):
        idx, cnt = current.replica
        return Mask(current.region, current.value,
                    (idx * spec.count + spec.index, cnt * spec.count))
    raise TransformError(f"unknown partition spec {spec!r}")


# ---------------------------------------------------------------------------
# dimension labels


@dataclass
class OpLabels:
    inputs: List[Tuple[str, ...]]
    outputs: List[Tuple[str, ...]]
    reduce: Set[str]
    frozen: Set[str]

    @property
    def spatial(self) -> List[str]:
        seen: List[str] = []
        for labels in self.outputs:
            for lab in labels:
                if lab not in seen and lab not in self.frozen:
                    seen.append(lab)
        return seen

    def all_labels(self) -> List[str]:
        seen: List[str] = []
        for labels in self.inputs + self.outputs:
            for lab in labels:
                if lab not in seen:
                    seen.append(lab)
        return seen


def _dims(n: int) -> Tuple[str, ...]:
    return tuple(f"d{i}" for i in range(n))


def builtin_labels(op: OpNode, in_ranks: Sequence[int]) -> OpLabels:
    kind, attrs = op.kind, op.attrs
    if kind == "matmul":
        a = ("k", "m") if attrs.get("trans_a") else ("m", "k")
        b = ("n", "k") if attrs.get("trans_b") else ("k", "n")
        return OpLabels([a, b], [("m", "n")], {"k"}, set())
    if kind in ("elementwise", "identity"):
        d = _dims(in_ranks[0])
        return OpLabels([d] * len(in_ranks), [d], set(), set())
    if kind == "reduce-op":
        d = _dims(in_ranks[0])
        dim = attrs.get("dim", len(d) - 1)
        return OpLabels([d], [d[:dim] + d[dim + 1:]], {d[dim]}, set())
    if kind == "embedding-lookup":
        ids = _dims(in_ranks[0])
        return OpLabels([ids, ("vocab", "hidden")], [ids + ("hidden",)], {"vocab"}, set())
    raise TransformError(f"op {op.id}: kind {kind!r} needs a dim_annotation")


def annotation_labels(op: OpNode, in_ranks: Sequence[int],
                      out_ranks: Sequence[int]) -> OpLabels:
    """Turn a per-dimension annotation into shared labels (union-find)."""
    ann = op.dim_annotation or {}
    ins, outs = ann.get("inputs", []), ann.get("outputs", [])
    if len(ins) != len(in_ranks) or len(outs) != len(out_ranks):
        raise TransformError(f"op {op.id}: annotation operand count mismatch")
    for tags, rank in zip(ins + outs, list(in_ranks) + list(out_ranks)):
        if len(tags) != rank:
            raise TransformError(f"op {op.id}: annotation rank {len(tags)} != operand rank {rank}")

    parent: Dict[tuple, tuple] = {}

    def find(x):
        parent.setdefault(x, x)
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(a, b):
        parent[find(a)] = find(b)

    out_partner: Dict[tuple, tuple] = {}
    in_partner: Dict[tuple, tuple] = {}
    for out_dim, in_op, in_dim in ann.get("co_partition", []):
        if not (0 <= out_dim < len(outs[0]) and 0 <= in_op < len(ins)
                and 0 <= in_dim < len(ins[in_op])):
            raise TransformError(f"op {op.id}: co_partition entry out of range")
        o, i = ("o", 0, out_dim), ("i", in_op, in_dim)
        key = (o, in_op)
        if out_partner.get(key, i) != i:
            raise TransformError(
                f"op {op.id}: contradictory annotation, output dim {out_dim} co-partitioned "
                f"with two dims of input {in_op}")
        if in_partner.get(i, o) != o:
            raise TransformError(
                f"op {op.id}: contradictory annotation, input {in_op} dim {in_dim} "
                f"co-partitioned with two output dims")
        out_partner[key] = i
        in_partner[i] = o
        union(o, i)
    linked_reduce: Set[tuple] = set()
    for a_op, a_dim, b_op, b_dim in ann.get("reduce_links", []):
        union(("i", a_op, a_dim), ("i", b_op, b_dim))
        linked_reduce |= {("i", a_op, a_dim), ("i", b_op, b_dim)}
    loose = [("i", k, d) for k, tags in enumerate(ins) for d, t in enumerate(tags)
             if t == "reduce" and ("i", k, d) not in linked_reduce]
    by_operand: Dict[int, int] = {}
    for _, k, _ in loose:
        by_operand[k] = by_operand.get(k, 0) + 1
    if loose and not ann.get("reduce_links") and all(c == 1 for c in by_operand.values()):
        for node in loose[1:]:
            union(loose[0], node)

    nodes = [("i", k, d) for k, t in enumerate(ins) for d in range(len(t))] + \
            [("o", k, d) for k, t in enumerate(outs) for d in range(len(t))]
    names: Dict[tuple, str] = {}
    for node in nodes:
        names.setdefault(find(node), f"L{len(names)}")
    tag = {("i", k, d): t for k, ts in enumerate(ins) for d, t in enumerate(ts)}
    tag.update({("o", k, d): t for k, ts in enumerate(outs) for d, t in enumerate(ts)})
    classes: Dict[str, List[tuple]] = {}
    for node in nodes:
        classes.setdefault(names[find(node)], []).append(node)

    reduce, frozen = set(), set()
    for lab, members in classes.items():
        tags = {tag[m] for m in members}
        in_out = any(m[0] == "o" for m in members)
        if "frozen" in tags:
            if len(tags) > 1:
                raise TransformError(f"op {op.id}: frozen dim linked to a partitionable dim")
            frozen.add(lab)
        elif "reduce" in tags:
            if in_out or tags != {"reduce"}:
                raise TransformError(f"op {op.id}: reduce dim co-partitioned with an output dim")
            reduce.add(lab)
        elif not in_out:
            raise TransformError(f"op {op.id}: spatial input dim is not co-partitioned "
                                 f"with any output dim")
    return OpLabels(
        [tuple(names[find(("i", k, d))] for d in range(len(t))) for k, t in enumerate(ins)],
        [tuple(names[find(("o", k, d))] for d in range(len(t))) for k, t in enumerate(outs)],
        reduce, frozen)


def op_labels(g: PlanGraph, op: OpNode) -> OpLabels:
    in_ranks = [len(g.ptensors[g.vtensors[v].ptensor].shape) for v in op.inputs]
    out_ranks = [len(g.ptensors[g.vtensors[v].ptensor].shape) for v in op.outputs]
    if op.dim_annotation is not None:
        return annotation_labels(op, in_ranks, out_ranks)
    return builtin_labels(op, in_ranks)


# ---------------------------------------------------------------------------
# transformation algorithms


class TransformAlgo:
    name = "algo"
    num = 1

    def resolve(self, g: PlanGraph, op: OpNode) -> "TransformAlgo":
        return self

    def specs(self, g: PlanGraph, op: OpNode) -> List[Tuple[List[PartitionSpec], List[PartitionSpec]]]:
        raise NotImplementedError

    def flops_of(self, flops: float) -> float:
        return flops

    def applicable(self, g: PlanGraph, op: OpNode) -> bool:
        try:
            self.resolve(g, op).specs(g, op)
        except TransformError:
            return False
        return True


@dataclass(frozen=True)
class ReplicaAlgo(TransformAlgo):
    num: int
    name = "replica"

    def specs(self, g, op):
        return [([Replica(i, self.num)] * len(op.inputs), [Replica(i, self.num)] * len(op.outputs))
                for i in range(self.num)]


@dataclass(frozen=True)
class LabelSplitAlgo(TransformAlgo):
    """Partition every operand carrying ``label`` into ``num`` equal slices."""

    label: str
    num: int
    name = "label-split"

    def flops_of(self, flops):
        return flops / self.num

    def specs(self, g, op):
        labels = op_labels(g, op)
        if self.label not in labels.all_labels():
            raise TransformError(f"op {op.id}: no dimension labelled {self.label!r}")
        if self.label in labels.frozen:
            raise TransformError(f"op {op.id}: dimension {self.label!r} is frozen")
        in_out = any(self.label in o for o in labels.outputs)
        if not in_out and self.label not in labels.reduce:
            raise TransformError(f"op {op.id}: {self.label!r} is neither spatial nor reduce")
        for vid, labs in zip(op.inputs + op.outputs, labels.inputs + labels.outputs):
            if self.label in labs:
                d = labs.index(self.label)
                lo, hi = g.vtensors[vid].region[d]
                if (hi - lo) % self.num:
                    raise TransformError(
                        f"op {op.id}: extent {hi - lo} of {vid} dim {d} not divisible by {self.num}")
        out = []
        for i in range(self.num):
            ins = [DimSlice(labs.index(self.label), i, self.num) if self.label in labs
                   else Replica(i, self.num) for labs in labels.inputs]
            outs = [DimSlice(labs.index(self.label), i, self.num) if self.label in labs
                    else ValueSlice(i, self.num) for labs in labels.outputs]
            out.append((ins, outs))
        return out


@dataclass(frozen=True)
class SplitAlgo(TransformAlgo):
    """Spatial split along ``dim`` of input ``operand`` (or of output 0 if ``output``)."""

    dim: int
    num: int
    operand: int = 0
    output: bool = False
    name = "split"

    def resolve(self, g, op):
        labels = op_labels(g, op)
        group = labels.outputs if self.output else labels.inputs
        if not 0 <= self.operand < len(group) or not 0 <= self.dim < len(group[self.operand]):
            raise TransformError(f"op {op.id}: no operand dim ({self.operand},{self.dim})")
        lab = group[self.operand][self.dim]
        if lab not in labels.spatial:
            raise TransformError(f"op {op.id}: dim {self.dim} is not spatially partitionable")
        return LabelSplitAlgo(lab, self.num)

    def specs(self, g, op):
        return self.resolve(g, op).specs(g, op)

    def flops_of(self, flops):
        return flops / self.num


@dataclass(frozen=True)
class ValueSplitAlgo(TransformAlgo):
    """Split a contracted dimension; outputs become partial-value summands."""

    num: int
    dim: Optional[int] = None
    operand: int = 0
    name = "value-split"

    def resolve(self, g, op):
        labels = op_labels(g, op)
        if self.dim is None:
            if len(labels.reduce) != 1:
                raise TransformError(f"op {op.id}: needs exactly one reduce dim, "
                                     f"has {sorted(labels.reduce)}")
            (lab,) = labels.reduce
        else:
            try:
                lab = labels.inputs[self.operand][self.dim]
            except IndexError:
                raise TransformError(f"op {op.id}: no operand dim ({self.operand},{self.dim})") from None
        if lab not in labels.reduce:
            raise TransformError(f"op {op.id}: dim {lab!r} is not a reduce dim")
        return LabelSplitAlgo(lab, self.num)

    def specs(self, g, op):
        return self.resolve(g, op).specs(g, op)

    def flops_of(self, flops):
        return flops / self.num


def ShardEmbedAlgo(num: int) -> ValueSplitAlgo:
    """Vocabulary-parallel embedding: shard the table rows, partial-sum outputs."""
    return ValueSplitAlgo(num)


# ---------------------------------------------------------------------------
# op-trans


def op_trans(g: PlanGraph, op_id: str, algo: TransformAlgo) -> List[str]:
    """Replace ``op_id`` by functionally equivalent sub-operators.

    Only the target's vTensors are refined; pTensors and every other operator
    stay untouched.  Returns the replacement op ids in partition order.
    """
    op = g.op(op_id)
    if op.inserted:
        raise TransformError(f"op {op_id}: materialization-phase kind {op.kind!r}")
    if g.materialized:
        raise TransformError("cannot transform a materialized graph")
    algo = algo.resolve(g, op)
    specs = algo.specs(g, op)
    if len(specs) == 1 and all(isinstance(s, (Replica, DimSlice, ValueSlice)) and s.count == 1
                               for s in specs[0][0] + specs[0][1]):
        return [op_id]

    in_masks = [g.vtensors[v] for v in op.inputs]
    out_masks = [g.vtensors[v] for v in op.outputs]
    device = g.assignment.get(op_id)
    if device is not None and len(specs) > 1:
        log.warning("op %s was assigned to device %s; assignment cleared by op_trans", op_id, device)
    edges = set(g.happen_before)
    g.remove_op(op_id)
    new_ids = []
    for i, (ispec, ospec) in enumerate(specs):
        nid = f"{op_id}.{i}"
        new = OpNode(nid, op.kind, direction=op.direction, flops=algo.flops_of(op.flops),
                     micro_batch=op.micro_batch, dim_annotation=op.dim_annotation,
                     backward_of=list(op.backward_of), attrs=dict(op.attrs),
                     order=op.order + (i,), origin=op.root, recompute_of=op.recompute_of)
        g.add_op(new,
                 [(vt.ptensor, compose_mask(vt.mask, s)) for vt, s in zip(in_masks, ispec)],
                 [(vt.ptensor, compose_mask(vt.mask, s)) for vt, s in zip(out_masks, ospec)])
        new_ids.append(nid)
    for a, b in edges:
        if a == op_id:
            g.happen_before |= {(n, b) for n in new_ids}
        elif b == op_id:
            g.happen_before |= {(a, n) for n in new_ids}
    for other in g.ops.values():
        if op_id in other.backward_of:
            other.backward_of = [x for x in other.backward_of if x != op_id] + new_ids
        if other.recompute_of == op_id:
            other.recompute_of = None
    g.meta.setdefault("lineage", {})[op_id] = new_ids
    return new_ids


def candidate_algos(g: PlanGraph, op: OpNode, num: int = 2) -> List[TransformAlgo]:
    labels = op_labels(g, op)
    algos: List[TransformAlgo] = [LabelSplitAlgo(lab, num) for lab in labels.spatial]
    algos += [LabelSplitAlgo(lab, num) for lab in sorted(labels.reduce)]
    algos.append(ReplicaAlgo(num))
    return algos


def derive_algos_from_annotation(op: OpNode, num: int = 2,
                                 operand_ranks: Optional[Tuple[Sequence[int], Sequence[int]]] = None
                                 ) -> List[TransformAlgo]:
    """SplitAlgo per spatial dim, ValueSplitAlgo per reduce dim, plus ReplicaAlgo."""
    if op.dim_annotation is None:
        raise TransformError(f"op {op.id} carries no dim_annotation")
    ann = op.dim_annotation
    if operand_ranks is None:
        operand_ranks = ([len(t) for t in ann["inputs"]], [len(t) for t in ann["outputs"]])
    labels = annotation_labels(op, *operand_ranks)
    algos: List[TransformAlgo] = []
    for d, lab in enumerate(labels.outputs[0]):
        if lab in labels.spatial:
            algos.append(SplitAlgo(d, num, output=True))
    for lab in sorted(labels.reduce):
        k, d = next((k, labs.index(lab)) for k, labs in enumerate(labels.inputs) if lab in labs)
        algos.append(ValueSplitAlgo(num, dim=d, operand=k))
    algos.append(ReplicaAlgo(num))
    return algos


# ---------------------------------------------------------------------------
# backward adaptation


def _label_map(g: PlanGraph, fwd: OpNode, bwd: OpNode) -> Dict[str, Set[str]]:
    """Forward label -> backward labels, matched through shared or gradient pTensors."""
    flabels, blabels = op_labels(g, fwd), op_labels(g, bwd)
    fops = [(g.vtensors[v].ptensor, labs)
            for v, labs in zip(fwd.inputs + fwd.outputs, flabels.inputs + flabels.outputs)]
    mapping: Dict[str, Set[str]] = {}
    for v, blabs in zip(bwd.inputs + bwd.outputs, blabels.inputs + blabels.outputs):
        pt = g.ptensors[g.vtensors[v].ptensor]
        target = pt.grad_of or pt.id
        flabs = next((labs for pid, labs in fops if pid == target), None)
        if flabs is None or len(flabs) != len(blabs):
            continue
        for fl, bl in zip(flabs, blabs):
            mapping.setdefault(fl, set()).add(bl)
    return mapping


def backward_algo(g: PlanGraph, fwd: OpNode, bwd: OpNode, algo: TransformAlgo) -> TransformAlgo:
    algo = algo.resolve(g, fwd)
    if isinstance(algo, ReplicaAlgo):
        return ReplicaAlgo(algo.num)
    if not isinstance(algo, LabelSplitAlgo):
        raise TransformError(f"cannot infer gradient partition for {algo!r}")
    targets = _label_map(g, fwd, bwd).get(algo.label, set())
    if len(targets) != 1:
        raise TransformError(
            f"op {bwd.id}: cannot infer gradient partition for label {algo.label!r} of {fwd.id}")
    return LabelSplitAlgo(targets.pop(), algo.num)


def adapt_backward(g: PlanGraph, forward_op: str, algo: TransformAlgo) -> List[str]:
    """Transform ``forward_op`` and, consistently, every backward op paired with it.

    Returns the forward replacement ids; the i-th replacement of each backward
    op is re-paired with the i-th forward replacement.
    """
    fwd = g.op(forward_op)
    bwds = [o for o in g.ops.values() if forward_op in o.backward_of]
    if not bwds:
        raise TransformError(f"op {forward_op}: no backward ops declare backward_of it")
    balgos = [(b.id, backward_algo(g, fwd, b, algo)) for b in bwds]
    new_f = op_trans(g, forward_op, algo)
    if new_f == [forward_op]:
        return new_f
    for bid, balgo in balgos:
        new_b = op_trans(g, bid, balgo)
        if len(new_b) != len(new_f):
            raise TransformError(f"op {bid}: backward fan-out {len(new_b)} != {len(new_f)}")
        for f, b in zip(new_f, new_b):
            g.ops[b].backward_of = [f]
    return new_f


def paired_backward(g: PlanGraph, forward_op: str) -> List[str]:
    return [o.id for o in g.ops.values() if forward_op in o.backward_of]


def mark_recompute(g: PlanGraph, op_id: str) -> str:
    """Clone a forward op so backward consumers read a regenerated output.

    The original's outputs then serve only non-backward consumers and can be
    released right after the forward pass.
    """
    op = g.op(op_id)
    if op.direction != "forward":
        raise TransformError(f"op {op_id}: only forward ops can be recomputed")
    rid = f"{op_id}.rc"
    clone = OpNode(rid, op.kind, direction="forward", flops=op.flops,
                   micro_batch=op.micro_batch, dim_annotation=op.dim_annotation,
                   attrs=dict(op.attrs, recompute=True), order=op.order, origin=op.root,
                   recompute_of=op_id)
    g.add_op(clone, [(g.vtensors[v].ptensor, g.vtensors[v].mask) for v in op.inputs],
             [(g.vtensors[v].ptensor, g.vtensors[v].mask) for v in op.outputs])
    return rid

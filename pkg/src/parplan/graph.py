"""Dataflow-graph IR: logical tensors, per-operator views and the plan graph.

A ``PTensor`` is a tensor of the original model and never changes.  Every
operator owns private ``VTensor`` views that link to a pTensor through a
``Mask``: an axis-aligned box plus (value, replica) coordinates.
"""

from __future__ import annotations

import copy
import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import jsonschema

from .errors import GraphError, SchemaError

log = logging.getLogger(__name__)

Region = Tuple[Tuple[int, int], ...]

TENSOR_KINDS = ("weight", "activation", "gradient", "optimizer-state")
DIRECTIONS = ("forward", "backward", "optimizer")
COMPUTE_KINDS = ("matmul", "elementwise", "reduce-op", "embedding-lookup", "identity")
# only created by materialization / communication planning
INSERTED_KINDS = ("split", "concat", "reduce-assemble", "send", "recv", "collective", "free")
ELEMENTWISE_FNS = ("add", "sub", "mul", "max")


# ---------------------------------------------------------------------------
# regions and masks


def full_region(shape: Sequence[int]) -> Region:
    return tuple((0, int(n)) for n in shape)


def region_shape(region: Region) -> Tuple[int, ...]:
    return tuple(hi - lo for lo, hi in region)


def region_size(region: Region) -> int:
    return math.prod(region_shape(region))


def region_intersect(a: Region, b: Region) -> Optional[Region]:
    if len(a) != len(b):
        raise GraphError(f"rank mismatch: {a} vs {b}")
    out = []
    for (alo, ahi), (blo, bhi) in zip(a, b):
        lo, hi = max(alo, blo), min(ahi, bhi)
        if lo >= hi:
            return None
        out.append((lo, hi))
    return tuple(out)


def region_cells(region: Region, cuts: Sequence[Sequence[int]]) -> List[Region]:
    """Coordinate-compressed sub-boxes of ``region`` along the given cut points."""
    axes = []
    for (lo, hi), pts in zip(region, cuts):
        pts = sorted({lo, hi, *(p for p in pts if lo < p < hi)})
        axes.append(list(zip(pts, pts[1:])))
    return [tuple(c) for c in itertools.product(*axes)]


def region_bbox(regions: Sequence[Region]) -> Region:
    return tuple((min(r[d][0] for r in regions), max(r[d][1] for r in regions))
                 for d in range(len(regions[0])))


def merge_boxes(regions: Sequence[Region]) -> List[Region]:
    """The bounding box when disjoint ``regions`` tile it exactly, else the regions."""
    box = region_bbox(regions)
    if region_size(box) == sum(region_size(r) for r in regions):
        return [box]
    return sorted(regions)


def region_contains(outer: Region, inner: Region) -> bool:
    return all(olo <= ilo and ihi <= ohi for (olo, ohi), (ilo, ihi) in zip(outer, inner))


def region_slices(region: Region, origin: Optional[Region] = None) -> Tuple[slice, ...]:
    """Index into a buffer holding ``origin`` to extract ``region``."""
    if origin is None:
        return tuple(slice(lo, hi) for lo, hi in region)
    return tuple(slice(lo - olo, hi - olo) for (lo, hi), (olo, _) in zip(region, origin))


def format_region(region: Region) -> str:
    return "x".join(f"[{lo},{hi})" for lo, hi in region)


@dataclass(frozen=True)
class Mask:
    region: Region
    value: Tuple[int, int] = (0, 1)
    replica: Tuple[int, int] = (0, 1)

    def __post_init__(self):
        for lo, hi in self.region:
            if not 0 <= lo < hi:
                raise GraphError(f"empty or negative interval [{lo},{hi})")
        for name, (idx, cnt) in (("value", self.value), ("replica", self.replica)):
            if not 0 <= idx < cnt:
                raise GraphError(f"bad {name} coordinate {idx}/{cnt}")

    @classmethod
    def full(cls, shape: Sequence[int]) -> "Mask":
        return cls(full_region(shape))

    @property
    def shape(self) -> Tuple[int, ...]:
        return region_shape(self.region)

    @property
    def nelems(self) -> int:
        return region_size(self.region)

    def is_full(self, shape: Sequence[int]) -> bool:
        return self.region == full_region(shape) and self.value[1] == 1

    def to_json(self) -> Dict[str, Any]:
        return {"region": [list(iv) for iv in self.region], "value": list(self.value),
                "replica": list(self.replica)}

    @classmethod
    def from_json(cls, doc) -> "Mask":
        return cls(tuple(tuple(iv) for iv in doc["region"]), tuple(doc["value"]),
                   tuple(doc["replica"]))

    def __str__(self):
        s = format_region(self.region)
        if self.value[1] > 1:
            s += f" v{self.value[0]}/{self.value[1]}"
        if self.replica[1] > 1:
            s += f" r{self.replica[0]}/{self.replica[1]}"
        return s


# ---------------------------------------------------------------------------
# tensors and operators


@dataclass(frozen=True)
class PTensor:
    id: str
    shape: Tuple[int, ...]
    elem_size: int = 4
    kind: str = "activation"
    grad_of: Optional[str] = None

    def __post_init__(self):
        if not self.shape or any(int(n) < 1 for n in self.shape):
            raise GraphError(f"pTensor {self.id}: extents must be >= 1, got {self.shape}")
        if self.kind not in TENSOR_KINDS:
            raise GraphError(f"pTensor {self.id}: unknown kind {self.kind!r}")

    @property
    def nbytes(self) -> int:
        return math.prod(self.shape) * self.elem_size


@dataclass
class VTensor:
    id: str
    ptensor: str
    mask: Mask
    side: str  # "in" (consumer input) or "out" (producer output)
    owner: str

    @property
    def region(self) -> Region:
        return self.mask.region


@dataclass
class OpNode:
    id: str
    kind: str
    inputs: List[str] = field(default_factory=list)
    outputs: List[str] = field(default_factory=list)
    direction: str = "forward"
    flops: float = 0.0
    micro_batch: Optional[int] = None
    dim_annotation: Optional[Dict[str, Any]] = None
    backward_of: List[str] = field(default_factory=list)
    attrs: Dict[str, Any] = field(default_factory=dict)
    order: Tuple[int, ...] = (0,)
    origin: Optional[str] = None
    recompute_of: Optional[str] = None

    @property
    def root(self) -> str:
        return self.origin or self.id

    @property
    def inserted(self) -> bool:
        return self.kind in INSERTED_KINDS


@dataclass(frozen=True)
class Link:
    bandwidth: float  # bytes / s
    latency: float  # s

    def time(self, nbytes: float) -> float:
        return nbytes / self.bandwidth + self.latency


@dataclass(frozen=True)
class Device:
    id: int
    group: int = 0
    memory_capacity: float = 32e9


@dataclass
class ClusterSpec:
    devices: List[Device]
    intra: Link = Link(150e9, 5e-6)
    inter: Link = Link(12.5e9, 10e-6)
    throughput: float = 100e12  # flop / s per device

    def __post_init__(self):
        ids = [d.id for d in self.devices]
        if len(set(ids)) != len(ids):
            raise GraphError("duplicate device ids")
        if any(d.memory_capacity <= 0 for d in self.devices):
            raise GraphError("device memory capacity must be > 0")
        self._by_id = {d.id: d for d in self.devices}

    @classmethod
    def uniform(cls, ndevs: int, group_size: Optional[int] = None, **kw) -> "ClusterSpec":
        group_size = group_size or ndevs
        return cls([Device(i, i // group_size) for i in range(ndevs)], **kw)

    @property
    def device_ids(self) -> List[int]:
        return [d.id for d in self.devices]

    def device(self, dev: int) -> Device:
        try:
            return self._by_id[dev]
        except KeyError:
            raise GraphError(f"unknown device {dev}") from None

    def link(self, devices: Iterable[int]) -> Link:
        groups = {self.device(d).group for d in devices}
        return self.intra if len(groups) <= 1 else self.inter

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "ClusterSpec":
        cap = float(doc.get("memory_capacity", 32e9))
        devs = doc.get("devices", 1)
        if isinstance(devs, int):
            gs = int(doc.get("group_size", devs))
            devices = [Device(i, i // gs, cap) for i in range(devs)]
        else:
            devices = [Device(int(d["id"]), int(d.get("group", 0)),
                              float(d.get("memory_capacity", cap))) for d in devs]
        kw = {}
        for name in ("intra", "inter"):
            if name in doc:
                kw[name] = Link(float(doc[name]["bandwidth"]), float(doc[name]["latency"]))
        if "throughput" in doc:
            kw["throughput"] = float(doc["throughput"])
        return cls(devices, **kw)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "devices": [{"id": d.id, "group": d.group, "memory_capacity": d.memory_capacity}
                        for d in self.devices],
            "intra": {"bandwidth": self.intra.bandwidth, "latency": self.intra.latency},
            "inter": {"bandwidth": self.inter.bandwidth, "latency": self.inter.latency},
            "throughput": self.throughput,
        }


# ---------------------------------------------------------------------------
# plan graph


class PlanGraph:
    """Execution-flow graph rewritten in place by the compiler passes."""

    def __init__(self, name: str = "graph"):
        self.name = name
        self.ptensors: Dict[str, PTensor] = {}
        self.vtensors: Dict[str, VTensor] = {}
        self.ops: Dict[str, OpNode] = {}
        self.happen_before: set = set()
        self.assignment: Dict[str, int] = {}
        # consumer vTensor -> the buffer (vTensor) it reads, after materialization
        self.bindings: Dict[str, str] = {}
        self.sequence: Optional[List[str]] = None
        self.materialized = False
        self.meta: Dict[str, Any] = {}

    # -- construction -----------------------------------------------------

    def add_ptensor(self, pt: PTensor) -> PTensor:
        if pt.id in self.ptensors:
            raise GraphError(f"duplicate pTensor id {pt.id}")
        self.ptensors[pt.id] = pt
        return pt

    def add_op(self, op: OpNode, inputs: Sequence[Tuple[str, Mask]],
               outputs: Sequence[Tuple[str, Mask]]) -> OpNode:
        """Insert ``op`` with fresh vTensors built from (pTensor id, mask) pairs."""
        if op.id in self.ops:
            raise GraphError(f"duplicate op id {op.id}")
        op.inputs, op.outputs = [], []
        for side, specs, dest in (("in", inputs, op.inputs), ("out", outputs, op.outputs)):
            for k, (pid, mask) in enumerate(specs):
                pt = self.ptensors.get(pid)
                if pt is None:
                    raise GraphError(f"op {op.id}: dangling tensor reference {pid!r}")
                if len(mask.region) != len(pt.shape) or not region_contains(
                        full_region(pt.shape), mask.region):
                    raise GraphError(f"op {op.id}: mask {mask} outside pTensor {pid}{pt.shape}")
                vid = f"{op.id}:{side[0]}{k}"
                self.vtensors[vid] = VTensor(vid, pid, mask, side, op.id)
                dest.append(vid)
        self.ops[op.id] = op
        return op

    def remove_op(self, op_id: str) -> OpNode:
        op = self.ops.pop(op_id)
        for vid in op.inputs + op.outputs:
            self.vtensors.pop(vid, None)
            self.bindings.pop(vid, None)
        self.assignment.pop(op_id, None)
        self.happen_before = {e for e in self.happen_before if op_id not in e}
        if self.sequence is not None:
            self.sequence = [o for o in self.sequence if o != op_id]
        return op

    def copy(self) -> "PlanGraph":
        return copy.deepcopy(self)

    # -- queries -----------------------------------------------------------

    def op(self, op_id: str) -> OpNode:
        try:
            return self.ops[op_id]
        except KeyError:
            raise GraphError(f"unknown op {op_id!r}") from None

    def vt(self, vid: str) -> VTensor:
        return self.vtensors[vid]

    def in_vts(self, op_id: str) -> List[VTensor]:
        return [self.vtensors[v] for v in self.ops[op_id].inputs]

    def out_vts(self, op_id: str) -> List[VTensor]:
        return [self.vtensors[v] for v in self.ops[op_id].outputs]

    def producers_of(self, pid: str) -> List[VTensor]:
        return [vt for vt in self.vtensors.values() if vt.side == "out" and vt.ptensor == pid]

    def consumers_of(self, pid: str) -> List[VTensor]:
        return [vt for vt in self.vtensors.values() if vt.side == "in" and vt.ptensor == pid]

    def produced_ptensors(self) -> List[str]:
        seen = []
        for op in self.ops.values():
            if op.inserted:
                continue
            for vt in self.out_vts(op.id):
                if vt.ptensor not in seen:
                    seen.append(vt.ptensor)
        return seen

    def input_ptensors(self) -> List[str]:
        produced = set(self.produced_ptensors())
        return [p for p in self.ptensors if p not in produced]

    def device_of(self, op_id: str) -> Optional[int]:
        return self.assignment.get(op_id)

    def vt_bytes(self, vid: str) -> int:
        vt = self.vtensors[vid]
        return vt.mask.nelems * self.ptensors[vt.ptensor].elem_size

    def device_orders(self) -> Dict[int, List[str]]:
        if self.sequence is None:
            raise GraphError("graph has no completed order")
        lanes: Dict[int, List[str]] = {}
        for op_id in self.sequence:
            lanes.setdefault(self.assignment[op_id], []).append(op_id)
        return dict(sorted(lanes.items()))

    def check(self) -> None:
        """Structural invariants; raises GraphError on violation."""
        for op in self.ops.values():
            for side, vids in (("in", op.inputs), ("out", op.outputs)):
                for vid in vids:
                    vt = self.vtensors.get(vid)
                    if vt is None or vt.owner != op.id or vt.side != side:
                        raise GraphError(f"op {op.id}: bad vTensor {vid}")
            if len(set(op.inputs + op.outputs)) != len(op.inputs) + len(op.outputs):
                raise GraphError(f"op {op.id} lists a vTensor twice")
        for a, b in self.happen_before:
            if a not in self.ops or b not in self.ops:
                raise GraphError(f"happen-before edge ({a},{b}) references unknown op")

    def snapshot_ptensors(self) -> Dict[str, PTensor]:
        return dict(self.ptensors)

    # -- serialization of the full state (plans) ---------------------------

    def to_state(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "ptensors": [_ptensor_doc(p) for p in self.ptensors.values()],
            "ops": [_op_state(op) for op in self.ops.values()],
            "vtensors": [{"id": v.id, "ptensor": v.ptensor, "mask": v.mask.to_json(),
                          "side": v.side, "owner": v.owner} for v in self.vtensors.values()],
            "happen_before": sorted([list(e) for e in self.happen_before]),
            "assignment": {k: v for k, v in self.assignment.items()},
            "bindings": dict(self.bindings),
            "sequence": self.sequence,
            "materialized": self.materialized,
        }

    @classmethod
    def from_state(cls, doc: Dict[str, Any]) -> "PlanGraph":
        g = cls(doc.get("name", "graph"))
        for p in doc["ptensors"]:
            g.add_ptensor(PTensor(p["id"], tuple(p["shape"]), p["elem_size"], p["kind"],
                                  p.get("grad_of")))
        for v in doc["vtensors"]:
            g.vtensors[v["id"]] = VTensor(v["id"], v["ptensor"], Mask.from_json(v["mask"]),
                                          v["side"], v["owner"])
        for o in doc["ops"]:
            g.ops[o["id"]] = OpNode(
                o["id"], o["kind"], list(o["inputs"]), list(o["outputs"]), o["direction"],
                o["flops"], o.get("micro_batch"), o.get("dim_annotation"),
                list(o.get("backward_of", [])), dict(o.get("attrs", {})),
                tuple(o.get("order", (0,))), o.get("origin"), o.get("recompute_of"))
        g.happen_before = {tuple(e) for e in doc.get("happen_before", [])}
        g.assignment = {k: int(v) for k, v in doc.get("assignment", {}).items()}
        g.bindings = dict(doc.get("bindings", {}))
        g.sequence = doc.get("sequence")
        g.materialized = bool(doc.get("materialized", False))
        return g

    def __repr__(self):
        return (f"PlanGraph({self.name!r}, ops={len(self.ops)}, "
                f"ptensors={len(self.ptensors)}, vtensors={len(self.vtensors)})")


def _ptensor_doc(p: PTensor) -> Dict[str, Any]:
    doc = {"id": p.id, "shape": list(p.shape), "elem_size": p.elem_size, "kind": p.kind}
    if p.grad_of is not None:
        doc["grad_of"] = p.grad_of
    return doc


def _op_state(op: OpNode) -> Dict[str, Any]:
    return {
        "id": op.id, "kind": op.kind, "inputs": op.inputs, "outputs": op.outputs,
        "direction": op.direction, "flops": op.flops, "micro_batch": op.micro_batch,
        "dim_annotation": op.dim_annotation, "backward_of": op.backward_of,
        "attrs": op.attrs, "order": list(op.order), "origin": op.origin,
        "recompute_of": op.recompute_of,
    }


def mask_intersect(a, b) -> Optional[Region]:
    """Box intersection of two masks (or vTensors) viewing the same pTensor.

    Value and replica coordinates are ignored here; dependency derivation
    consults them separately.
    """
    if isinstance(a, VTensor) and isinstance(b, VTensor):
        if a.ptensor != b.ptensor:
            raise GraphError(f"cannot intersect views of {a.ptensor} and {b.ptensor}")
        a, b = a.mask, b.mask
    elif isinstance(a, VTensor) or isinstance(b, VTensor):
        raise GraphError("mask_intersect needs two masks or two vTensors")
    return region_intersect(a.region, b.region)


# ---------------------------------------------------------------------------
# graph documents

_ANNOTATION_SCHEMA = {
    "type": "object",
    "properties": {
        "inputs": {"type": "array", "items": {"type": "array", "items": {
            "enum": ["spatial", "reduce", "frozen"]}}},
        "outputs": {"type": "array", "items": {"type": "array", "items": {
            "enum": ["spatial", "reduce", "frozen"]}}},
        "co_partition": {"type": "array", "items": {
            "type": "array", "items": {"type": "integer"}, "minItems": 3, "maxItems": 3}},
        "reduce_links": {"type": "array", "items": {
            "type": "array", "items": {"type": "integer"}, "minItems": 4, "maxItems": 4}},
    },
    "required": ["inputs", "outputs"],
    "additionalProperties": False,
}

GRAPH_SCHEMA = {
    "type": "object",
    "properties": {
        "name": {"type": "string"},
        "ptensors": {"type": "array", "items": {
            "type": "object",
            "properties": {
                "id": {"type": "string"},
                "shape": {"type": "array", "items": {"type": "integer", "minimum": 1},
                          "minItems": 1},
                "elem_size": {"type": "integer", "minimum": 1},
                "kind": {"enum": list(TENSOR_KINDS)},
                "grad_of": {"type": "string"},
            },
            "required": ["id", "shape", "elem_size", "kind"],
            "additionalProperties": False,
        }},
        "ops": {"type": "array", "items": {
            "type": "object",
            "properties": {
                "id": {"type": "string"},
                "kind": {"type": "string"},
                "inputs": {"type": "array", "items": {"type": "string"}},
                "outputs": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                "direction": {"enum": list(DIRECTIONS)},
                "flops": {"type": "number", "minimum": 0},
                "dim_annotation": _ANNOTATION_SCHEMA,
                "backward_of": {"type": "string"},
                "attrs": {"type": "object"},
            },
            "required": ["id", "kind", "inputs", "outputs", "direction", "flops"],
            "additionalProperties": False,
        }},
    },
    "required": ["ptensors", "ops"],
    "additionalProperties": False,
}


def infer_output_shapes(kind: str, attrs: Dict[str, Any],
                        in_shapes: List[Tuple[int, ...]]) -> Optional[List[Tuple[int, ...]]]:
    """Output shapes for the built-in kinds, or None for annotated custom kinds."""
    if kind == "matmul":
        if len(in_shapes) != 2 or any(len(s) != 2 for s in in_shapes):
            raise GraphError("matmul takes two rank-2 operands")
        a, b = in_shapes
        m, k = (a[1], a[0]) if attrs.get("trans_a") else a
        k2, n = (b[1], b[0]) if attrs.get("trans_b") else b
        if k != k2:
            raise GraphError(f"matmul contraction mismatch {a} x {b}")
        return [(m, n)]
    if kind == "elementwise":
        if attrs.get("fn", "add") not in ELEMENTWISE_FNS:
            raise GraphError(f"unknown elementwise fn {attrs.get('fn')!r}")
        if not in_shapes or len(set(in_shapes)) != 1:
            raise GraphError(f"elementwise operands must share a shape, got {in_shapes}")
        return [in_shapes[0]]
    if kind == "reduce-op":
        if len(in_shapes) != 1:
            raise GraphError("reduce-op takes one operand")
        (s,) = in_shapes
        dim = attrs.get("dim", len(s) - 1)
        if not 0 <= dim < len(s) or len(s) < 2:
            raise GraphError(f"reduce-op dim {dim} invalid for shape {s}")
        return [s[:dim] + s[dim + 1:]]
    if kind == "embedding-lookup":
        if len(in_shapes) != 2 or len(in_shapes[1]) != 2:
            raise GraphError("embedding-lookup takes (ids, table[V,h])")
        return [in_shapes[0] + (in_shapes[1][1],)]
    if kind == "identity":
        if len(in_shapes) != 1:
            raise GraphError("identity takes one operand")
        return [in_shapes[0]]
    return None


def default_flops(kind: str, attrs: Dict[str, Any], in_shapes, out_shapes) -> float:
    if kind == "matmul":
        a = in_shapes[0]
        k = a[0] if attrs.get("trans_a") else a[1]
        m, n = out_shapes[0]
        return 2.0 * m * k * n
    if kind in ("elementwise", "reduce-op"):
        return float(math.prod(in_shapes[0]))
    return 0.0


def load_graph(document) -> PlanGraph:
    """Build a PlanGraph from a graph document (JSON text or parsed dict).

    Every operand gets its own vTensor whose mask covers the whole pTensor.
    """
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"graph document is not valid JSON: {exc}") from exc
    try:
        jsonschema.validate(document, GRAPH_SCHEMA)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path)
        raise SchemaError(f"schema violation at {path or '<root>'}: {exc.message}") from None

    g = PlanGraph(document.get("name", "graph"))
    for p in document["ptensors"]:
        g.add_ptensor(PTensor(p["id"], tuple(p["shape"]), p["elem_size"], p["kind"],
                              p.get("grad_of")))
    for p in g.ptensors.values():
        if p.grad_of is not None:
            src = g.ptensors.get(p.grad_of)
            if src is None:
                raise GraphError(f"pTensor {p.id}: grad_of references unknown {p.grad_of!r}")
            if src.shape != p.shape:
                raise GraphError(f"gradient {p.id} shape {p.shape} != {src.id} {src.shape}")

    produced_by: Dict[str, str] = {}
    for idx, o in enumerate(document["ops"]):
        kind = o["kind"]
        if kind in INSERTED_KINDS:
            raise GraphError(f"op {o['id']}: kind {kind!r} is reserved for materialization")
        if kind not in COMPUTE_KINDS and "dim_annotation" not in o:
            raise GraphError(f"op {o['id']}: custom kind {kind!r} requires a dim_annotation")
        for pid in o["inputs"] + o["outputs"]:
            if pid not in g.ptensors:
                raise GraphError(f"op {o['id']}: dangling tensor reference {pid!r}")
        attrs = dict(o.get("attrs", {}))
        in_shapes = [g.ptensors[p].shape for p in o["inputs"]]
        out_shapes = [g.ptensors[p].shape for p in o["outputs"]]
        try:
            expect = infer_output_shapes(kind, attrs, in_shapes)
        except GraphError as exc:
            raise GraphError(f"op {o['id']}: {exc}") from None
        if expect is not None and expect != out_shapes:
            raise GraphError(f"op {o['id']}: shape mismatch, expected outputs {expect}, "
                             f"declared {out_shapes}")
        for pid in o["outputs"]:
            if pid in produced_by:
                raise GraphError(f"pTensor {pid} produced by both {produced_by[pid]} and {o['id']}")
            produced_by[pid] = o["id"]
        flops = float(o["flops"])
        op = OpNode(o["id"], kind, direction=o["direction"], flops=flops,
                    dim_annotation=o.get("dim_annotation"),
                    backward_of=[o["backward_of"]] if "backward_of" in o else [],
                    attrs=attrs, order=(idx,))
        g.add_op(op, [(p, Mask.full(g.ptensors[p].shape)) for p in o["inputs"]],
                 [(p, Mask.full(g.ptensors[p].shape)) for p in o["outputs"]])
    for op in g.ops.values():
        for f in op.backward_of:
            if f not in g.ops:
                raise GraphError(f"op {op.id}: backward_of references unknown op {f!r}")
    g.check()
    return g


def graph_document(g: PlanGraph) -> Dict[str, Any]:
    """Inverse of :func:`load_graph` for unpartitioned graphs."""
    ops = []
    for op in g.ops.values():
        doc = {"id": op.id, "kind": op.kind,
               "inputs": [g.vtensors[v].ptensor for v in op.inputs],
               "outputs": [g.vtensors[v].ptensor for v in op.outputs],
               "direction": op.direction, "flops": op.flops}
        if op.dim_annotation is not None:
            doc["dim_annotation"] = op.dim_annotation
        if op.backward_of:
            doc["backward_of"] = op.backward_of[0]
        if op.attrs:
            doc["attrs"] = op.attrs
        ops.append(doc)
    return {"name": g.name, "ptensors": [_ptensor_doc(p) for p in g.ptensors.values()],
            "ops": ops}

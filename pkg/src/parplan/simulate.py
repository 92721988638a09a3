"""Discrete-event simulation of execution plans under the cost model."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

from .errors import SimulationDeadlock, SimulationError
from .graph import ClusterSpec, PlanGraph
from .materialize import buffer_of, union_size

LOCAL_KINDS = ("split", "concat", "reduce-assemble")


@dataclass
class Task:
    id: str  # op id
    kind: str  # compute | local | send | recv | collective | free
    duration: float = 0.0
    alloc: List[Tuple[str, str, int]] = field(default_factory=list)  # (buffer, ptensor, bytes)
    release: List[str] = field(default_factory=list)  # buffer keys
    key: Optional[str] = None  # piece id or collective id
    label: str = ""
    waits: List[str] = field(default_factory=list)  # op-order predecessors on other devices

    def to_dict(self) -> Dict[str, Any]:
        d = {"id": self.id, "kind": self.kind, "duration": self.duration}
        if self.alloc:
            d["alloc"] = [list(a) for a in self.alloc]
        if self.release:
            d["release"] = list(self.release)
        if self.key is not None:
            d["key"] = self.key
        if self.label:
            d["label"] = self.label
        if self.waits:
            d["waits"] = list(self.waits)
        return d

    @classmethod
    def from_dict(cls, d) -> "Task":
        return cls(d["id"], d["kind"], float(d.get("duration", 0.0)),
                   [tuple(a) for a in d.get("alloc", [])], list(d.get("release", [])),
                   d.get("key"), d.get("label", ""), list(d.get("waits", [])))


@dataclass
class ExecutionPlan:
    lanes: Dict[int, List[Task]]
    initial: Dict[int, List[Tuple[str, str, int]]]  # resident buffers at t=0
    capacity: Dict[int, float]
    tensor_kinds: Dict[str, str]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "lanes": {str(d): [t.to_dict() for t in lane] for d, lane in self.lanes.items()},
            "initial": {str(d): [list(b) for b in bufs] for d, bufs in self.initial.items()},
            "capacity": {str(d): c for d, c in self.capacity.items()},
            "tensor_kinds": dict(sorted(self.tensor_kinds.items())),
        }

    @classmethod
    def from_dict(cls, doc) -> "ExecutionPlan":
        try:
            return cls({int(d): [Task.from_dict(t) for t in lane]
                        for d, lane in doc["lanes"].items()},
                       {int(d): [tuple(b) for b in bufs]
                        for d, bufs in doc.get("initial", {}).items()},
                       {int(d): float(c) for d, c in doc.get("capacity", {}).items()},
                       dict(doc.get("tensor_kinds", {})))
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise SimulationError(f"malformed execution plan: {exc}") from None


def _buf_name(buf: Tuple) -> str:
    if buf[0] == "vt":
        return buf[1]
    # every region of a resident input on one device shares a single buffer
    _, pid, _, dev = buf
    return f"init:{pid}@{dev}"


def lower(g: PlanGraph, cluster: ClusterSpec) -> ExecutionPlan:
    """Turn a materialized, ordered graph into per-device task lists."""
    if not g.materialized or g.sequence is None:
        raise SimulationError("lowering needs a materialized, ordered graph")
    missing = [o for o in g.sequence if o not in g.assignment]
    if missing:
        raise SimulationError(f"ops without device assignment: {missing[:5]}")
    lanes: Dict[int, List[Task]] = {}
    resident: Dict[int, Dict[str, set]] = {}
    pending_frees: Dict[str, set] = {}
    for op_id in g.sequence:
        op = g.ops[op_id]
        if op.kind == "free":
            continue
        for vid in op.inputs:
            buf = buffer_of(g, vid)
            if buf[0] == "init":
                resident.setdefault(buf[3], {}).setdefault(buf[1], set()).add(buf[2])
    for op_id in g.sequence:
        op = g.ops[op_id]
        dev = g.assignment[op_id]
        lane = lanes.setdefault(dev, [])
        allocs = [(vid, g.vtensors[vid].ptensor, g.vt_bytes(vid)) for vid in op.outputs]
        if op.kind == "free":
            buf = buffer_of(g, op.inputs[0])
            release = [_buf_name(buf)]
            if buf[0] == "init":
                # the shared buffer goes away with its last region
                left = pending_frees.setdefault(release[0], set(resident[buf[3]][buf[1]]))
                left.discard(buf[2])
                release = [] if left else release
            lane.append(Task(op_id, "free", release=release))
        elif op.kind == "send":
            link = cluster.link([op.attrs["src"], op.attrs["dst"]])
            lane.append(Task(op_id, "send", link.time(op.attrs["bytes"]), key=op.attrs["piece"]))
        elif op.kind == "recv":
            lane.append(Task(op_id, "recv", 0.0, allocs, key=op.attrs["piece"]))
        elif op.kind == "collective":
            lane.append(Task(op_id, "collective", float(op.attrs["cost"]), allocs,
                             key=op.attrs["collective_id"], label=op.attrs["primitive"]))
        elif op.kind in LOCAL_KINDS:
            lane.append(Task(op_id, "local", 0.0, allocs, label=op.kind))
        elif op.inserted:
            raise SimulationError(f"op {op_id}: unknown inserted kind {op.kind}")
        else:
            lane.append(Task(op_id, "compute", op.flops / cluster.throughput, allocs,
                             label=op.kind))
    # op-order across devices is honored at run time as a zero-cost signal
    waits: Dict[str, List[str]] = {}
    for a, b in sorted(g.happen_before):
        if a in g.assignment and b in g.assignment and g.assignment[a] != g.assignment[b]:
            waits.setdefault(b, []).append(a)
    for lane in lanes.values():
        for task in lane:
            task.waits = waits.get(task.id, [])
    initial: Dict[int, List[Tuple[str, str, int]]] = {}
    for d in sorted(lanes):
        bufs = []
        for pid, regions in sorted(resident.get(d, {}).items()):
            nbytes = union_size(sorted(regions)) * g.ptensors[pid].elem_size
            bufs.append((f"init:{pid}@{d}", pid, nbytes))
        initial[d] = bufs
    return ExecutionPlan(
        dict(sorted(lanes.items())), initial,
        {d: cluster.device(d).memory_capacity for d in lanes},
        {p.id: p.kind for p in g.ptensors.values()})


@dataclass
class DeviceStats:
    compute: float = 0.0
    comm: float = 0.0
    idle: float = 0.0
    peak_memory: int = 0
    peak_time: float = 0.0
    finish: float = 0.0
    peak_by_ptensor: Dict[str, int] = field(default_factory=dict)
    peak_by_kind: Dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {"compute": self.compute, "comm": self.comm, "idle": self.idle,
                "peak_memory": self.peak_memory, "peak_time": self.peak_time,
                "peak_by_kind": dict(sorted(self.peak_by_kind.items())),
                "peak_by_ptensor": dict(sorted(self.peak_by_ptensor.items()))}


@dataclass
class SimReport:
    makespan: float
    devices: Dict[int, DeviceStats]
    trace: List[Tuple[int, str, str, str, float, float]]  # dev, task, kind, label, start, end
    oom: List[int] = field(default_factory=list)

    def bubble_fraction(self, dev: int) -> float:
        return self.devices[dev].idle / self.makespan if self.makespan else 0.0

    def peak_ptensor(self, pid: str) -> int:
        return max((s.peak_by_ptensor.get(pid, 0) for s in self.devices.values()), default=0)

    def peak_kind(self, kind: str) -> int:
        return max((s.peak_by_kind.get(kind, 0) for s in self.devices.values()), default=0)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "makespan": self.makespan,
            "devices": {str(d): s.to_dict() for d, s in self.devices.items()},
            "oom": self.oom,
            "trace": [{"device": d, "task": t, "kind": k, "label": l, "start": s, "end": e}
                      for d, t, k, l, s, e in self.trace],
        }

    def table(self) -> str:
        rows = [f"makespan: {self.makespan:.6g} s",
                f"{'device':>6} {'compute':>12} {'comm':>12} {'bubble':>12} {'bubble%':>8} "
                f"{'peak_mem':>12}"]
        for d, s in self.devices.items():
            rows.append(f"{d:>6} {s.compute:>12.6g} {s.comm:>12.6g} {s.idle:>12.6g} "
                        f"{100 * self.bubble_fraction(d):>7.2f}% {s.peak_memory:>12d}")
        if self.oom:
            rows.append("out of memory on devices: " + ", ".join(map(str, self.oom)))
        return "\n".join(rows)

    def csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["device", "compute_s", "comm_s", "bubble_s", "bubble_fraction",
                    "peak_memory_bytes", "peak_time_s"])
        for d, s in self.devices.items():
            w.writerow([d, repr(s.compute), repr(s.comm), repr(s.idle),
                        repr(self.bubble_fraction(d)), s.peak_memory, repr(s.peak_time)])
        return out.getvalue()


class _Memory:
    def __init__(self, kinds: Dict[str, str]):
        self.kinds = kinds
        self.live: Dict[str, Tuple[str, int]] = {}
        self.total = 0
        self.by_pt: Dict[str, int] = {}
        self.by_kind: Dict[str, int] = {}
        self.stats: Optional[DeviceStats] = None

    def alloc(self, name: str, pid: str, nbytes: int, t: float):
        if name in self.live:
            return
        self.live[name] = (pid, nbytes)
        self.total += nbytes
        self.by_pt[pid] = self.by_pt.get(pid, 0) + nbytes
        kind = self.kinds.get(pid, "activation")
        self.by_kind[kind] = self.by_kind.get(kind, 0) + nbytes
        s = self.stats
        if self.total > s.peak_memory:
            s.peak_memory, s.peak_time = self.total, t
        s.peak_by_ptensor[pid] = max(s.peak_by_ptensor.get(pid, 0), self.by_pt[pid])
        s.peak_by_kind[kind] = max(s.peak_by_kind.get(kind, 0), self.by_kind[kind])

    def free(self, name: str):
        if name not in self.live:
            return
        pid, nbytes = self.live.pop(name)
        self.total -= nbytes
        self.by_pt[pid] -= nbytes
        self.by_kind[self.kinds.get(pid, "activation")] -= nbytes


def simulate(plan: ExecutionPlan) -> SimReport:
    """Event-driven execution; each device is one serial timeline (no overlap)."""
    devs = list(plan.lanes)
    stats = {d: DeviceStats() for d in devs}
    mem = {}
    for d in devs:
        m = _Memory(plan.tensor_kinds)
        m.stats = stats[d]
        for name, pid, nbytes in plan.initial.get(d, []):
            m.alloc(name, pid, int(nbytes), 0.0)
        mem[d] = m
    clock = dict.fromkeys(devs, 0.0)
    pc = dict.fromkeys(devs, 0)
    sends: Dict[str, Tuple[float, float]] = {}
    arrivals: Dict[str, Dict[int, float]] = {}
    members: Dict[str, set] = {}
    for d, lane in plan.lanes.items():
        for t in lane:
            if t.kind == "collective":
                members.setdefault(t.key, set()).add(d)
    trace = []
    finished: Dict[str, float] = {}

    def record(d, task, start, end):
        trace.append((d, task.id, task.kind, task.label, start, end))
        finished[task.id] = end
        clock[d] = end
        pc[d] += 1
        for name, pid, nbytes in task.alloc:
            mem[d].alloc(name, pid, int(nbytes), start)
        for name in task.release:
            mem[d].free(name)

    remaining = sum(len(l) for l in plan.lanes.values())
    while remaining:
        progressed = False
        for d in devs:
            lane = plan.lanes[d]
            while pc[d] < len(lane):
                task = lane[pc[d]]
                if any(w not in finished for w in task.waits):
                    break
                start = max([clock[d]] + [finished[w] for w in task.waits])
                if task.kind == "recv":
                    if task.key not in sends:
                        break
                    s0, s1 = sends[task.key]
                    end = max(start, s1)
                    stats[d].comm += end - max(start, s0) if end > max(start, s0) else 0.0
                    record(d, task, start, end)
                elif task.kind == "collective":
                    box = arrivals.setdefault(task.key, {})
                    box.setdefault(d, start)
                    if set(box) != members[task.key]:
                        break
                    begin = max(box.values())
                    for m in sorted(members[task.key]):
                        peer = plan.lanes[m][pc[m]]
                        stats[m].comm += task.duration
                        record(m, peer, begin, begin + peer.duration)
                        remaining -= 1 if m != d else 0
                else:
                    end = start + task.duration
                    if task.kind == "compute":
                        stats[d].compute += task.duration
                    elif task.kind == "send":
                        stats[d].comm += task.duration
                        sends[task.key] = (start, end)
                    record(d, task, start, end)
                remaining -= 1
                progressed = True
        if not progressed:
            waiting = {d: plan.lanes[d][pc[d]].id for d in devs if pc[d] < len(plan.lanes[d])}
            raise SimulationDeadlock(waiting)
    makespan = max(clock.values(), default=0.0)
    for d in devs:
        s = stats[d]
        s.finish = clock[d]
        s.idle = makespan - s.compute - s.comm
        if abs(s.idle) < 1e-15 * max(1.0, makespan):
            s.idle = max(s.idle, 0.0)
    oom = [d for d in devs if stats[d].peak_memory > plan.capacity.get(d, math.inf)]
    trace.sort(key=lambda e: (e[4], e[0], e[1]))
    return SimReport(makespan, stats, trace, oom)


def simulate_graph(g: PlanGraph, cluster: ClusterSpec) -> SimReport:
    return simulate(lower(g, cluster))

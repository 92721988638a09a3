"""RVD layouts and shortest-cost collective composition.

A layout is an (r, v, d1..dn) grid of device ids.  Every collective moves a
factor k from one grid axis to another: the source axis index is split as
(outer, inner) and the inner index is appended to the target axis, so a
device at (.., a*k + j, .., b, ..) ends up at (.., a, .., b*k + j, ..).
"""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import CommPlanError
from .graph import ClusterSpec, Mask, Region, full_region, region_intersect

R_AXIS, V_AXIS = 0, 1

INTRA_PRIMITIVES = ("local-split", "all-gather", "all-reduce", "reduce-scatter", "all-to-all")
INTER_PRIMITIVES = ("group-copy", "rd-scatter")

MAX_STATES = 200_000


def axis_name(axis: int) -> str:
    return "R" if axis == R_AXIS else "V" if axis == V_AXIS else f"D{axis - 1}"


@dataclass(frozen=True)
class RVDDescriptor:
    r: int
    v: int
    d: Tuple[int, ...]

    @property
    def shape(self) -> Tuple[int, ...]:
        return (self.r, self.v) + tuple(self.d)

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    def __str__(self):
        return f"R({self.r})V({self.v})D({','.join(map(str, self.d))})"

    @classmethod
    def parse(cls, text: str) -> "RVDDescriptor":
        import re
        m = re.fullmatch(r"\s*R\((\d+)\)V\((\d+)\)D\(([\d,\s]+)\)\s*", text)
        if not m:
            raise CommPlanError(f"bad RVD descriptor {text!r}")
        return cls(int(m[1]), int(m[2]), tuple(int(x) for x in m[3].split(",")))


@dataclass(frozen=True)
class RVDLayout:
    """A descriptor plus which device holds each (r, v, d..) slot."""

    desc: RVDDescriptor
    grid: Tuple[int, ...]  # device ids, row-major over desc.shape
    base: Region  # the box the grid partitions
    side: int = 0  # 0 = producer group, 1 = consumer group (inter search)

    @classmethod
    def canonical(cls, desc: RVDDescriptor, devices: Sequence[int], base: Region,
                  side: int = 0) -> "RVDLayout":
        if len(devices) != desc.size:
            raise CommPlanError(f"{desc} needs {desc.size} devices, got {len(devices)}")
        return cls(desc, tuple(devices), tuple(base), side)

    def array(self) -> np.ndarray:
        return np.array(self.grid, dtype=np.int64).reshape(self.desc.shape)

    @property
    def devices(self) -> Tuple[int, ...]:
        return self.grid

    def slot_of(self, dev: int) -> Tuple[int, ...]:
        flat = self.grid.index(dev)
        return tuple(int(x) for x in np.unravel_index(flat, self.desc.shape))

    def mask_at(self, slot: Sequence[int]) -> Mask:
        ridx, vidx, *didx = slot
        region = []
        for (lo, hi), n, i in zip(self.base, self.desc.d, didx):
            step = (hi - lo) // n
            region.append((lo + i * step, lo + (i + 1) * step))
        return Mask(tuple(region), (vidx, self.desc.v), (ridx, self.desc.r))

    def mask_of(self, dev: int) -> Mask:
        return self.mask_at(self.slot_of(dev))

    def content(self) -> Dict[int, Tuple]:
        """device -> (value index, dim indices); replica index is irrelevant."""
        out = {}
        for flat, dev in enumerate(self.grid):
            slot = np.unravel_index(flat, self.desc.shape)
            out[dev] = tuple(int(x) for x in slot[1:])
        return out

    def key(self):
        return (self.side, self.desc.shape, self.grid)

    def __str__(self):
        return f"{self.desc}@{list(self.grid)}"


def to_rvd(pieces: Sequence[Tuple[Mask, int]], shape: Sequence[int],
           base: Optional[Region] = None) -> Optional[RVDLayout]:
    """Recognize a perfect (r, v, d) grid of masks over ``base``; None if irregular."""
    if not pieces:
        return None
    base = tuple(base) if base is not None else full_region(shape)
    r = pieces[0][0].replica[1]
    v = pieces[0][0].value[1]
    lens = [hi - lo for lo, hi in pieces[0][0].region]
    d = []
    for (lo, hi), ln in zip(base, lens):
        if ln <= 0 or (hi - lo) % ln:
            return None
        d.append((hi - lo) // ln)
    desc = RVDDescriptor(r, v, tuple(d))
    if desc.size != len(pieces) or len({dev for _, dev in pieces}) != len(pieces):
        return None
    grid = [None] * desc.size
    for mask, dev in pieces:
        if mask.replica[1] != r or mask.value[1] != v:
            return None
        didx = []
        for (blo, bhi), (lo, hi), ln in zip(base, mask.region, lens):
            if hi - lo != ln or (lo - blo) % ln or lo < blo or hi > bhi:
                return None
            didx.append((lo - blo) // ln)
        flat = int(np.ravel_multi_index((mask.replica[0], mask.value[0], *didx), desc.shape))
        if grid[flat] is not None:
            return None
        grid[flat] = dev
    return RVDLayout(desc, tuple(grid), base)


# ---------------------------------------------------------------------------
# steps


@dataclass
class CommStep:
    primitive: str
    k: int
    src_axis: Optional[int]
    dst_axis: Optional[int]
    groups: List[List[int]]
    cost: float
    before: RVDLayout
    after: RVDLayout
    relabel: bool = False
    # out device -> [(source device, region)]; sum semantics
    transfers: Dict[int, List[Tuple[int, Region]]] = field(default_factory=dict, repr=False)

    @property
    def axis(self) -> str:
        if self.src_axis is None:
            return "-"
        return f"{axis_name(self.src_axis)}->{axis_name(self.dst_axis)}"

    @property
    def participants(self) -> List[int]:
        return sorted({d for grp in self.groups for d in grp})

    def describe(self) -> str:
        return (f"{self.before.desc} -[{self.primitive} k={self.k} {self.axis}]-> "
                f"{self.after.desc}  cost={self.cost:.6g}")


@dataclass
class CommPlan:
    steps: List[CommStep]
    cost: float

    @property
    def primitives(self) -> List[str]:
        return [s.primitive for s in self.steps]

    def listing(self) -> str:
        lines = [s.describe() for s in self.steps]
        lines.append(f"total cost={self.cost:.6g}")
        return "\n".join(lines)


def block_bytes(layout: RVDLayout, elem_size: int) -> float:
    n = elem_size
    for (lo, hi), k in zip(layout.base, layout.desc.d):
        n *= (hi - lo) // k
    return n


def _divisors(n: int) -> List[int]:
    return [k for k in range(2, n + 1) if n % k == 0]


def move_axis(layout: RVDLayout, a: int, b: int, k: int):
    """New layout plus participant groups for moving factor k from axis a to b."""
    shape = layout.desc.shape
    arr = layout.array()
    split = shape[:a] + (shape[a] // k, k) + shape[a + 1:]
    arr = arr.reshape(split)
    inner_last = np.moveaxis(arr, a + 1, -1)
    groups = inner_last.reshape(-1, k).tolist()
    moved = np.moveaxis(inner_last, -1, b + 1)
    new_shape = list(shape)
    new_shape[a] //= k
    new_shape[b] *= k
    new = moved.reshape(new_shape)
    desc = RVDDescriptor(new_shape[0], new_shape[1], tuple(new_shape[2:]))
    return RVDLayout(desc, tuple(int(x) for x in new.ravel()), layout.base, layout.side), groups


def intra_cost(primitive: str, k: int, n_in: float, link) -> float:
    if primitive == "local-split":
        return 0.0
    if primitive == "all-reduce":
        return 2 * (k - 1) / k * n_in / link.bandwidth + link.latency
    if primitive == "all-gather":
        return (k - 1) / k * (n_in * k) / link.bandwidth + link.latency
    if primitive in ("reduce-scatter", "all-to-all"):
        return (k - 1) / k * n_in / link.bandwidth + link.latency
    raise CommPlanError(f"unknown intra primitive {primitive}")


def _classify(a: int, b: int) -> Optional[str]:
    if a == V_AXIS and b == R_AXIS:
        return "all-reduce"
    if a == V_AXIS and b >= 2:
        return "reduce-scatter"
    if a >= 2 and b == R_AXIS:
        return "all-gather"
    if a >= 2 and b >= 2 and a != b:
        return "all-to-all"
    if a == R_AXIS and (b >= 2 or b == V_AXIS):
        return "local-split"
    return None


def _transfers(prim: str, before: RVDLayout, after: RVDLayout,
               groups: List[List[int]]) -> Dict[int, List[Tuple[int, Region]]]:
    out: Dict[int, List[Tuple[int, Region]]] = {}
    for grp in groups:
        for j, dev in enumerate(grp):
            new = after.mask_of(dev)
            if prim == "local-split":
                if new.value[1] != before.mask_of(dev).value[1] and j != 0:
                    out[dev] = []  # value slot j != 0 starts as zeros
                else:
                    out[dev] = [(dev, new.region)]
                continue
            srcs = []
            for m in grp:
                ov = region_intersect(before.mask_of(m).region, new.region)
                if ov is not None:
                    srcs.append((m, ov))
            out[dev] = srcs
    return out


def intra_successors(layout: RVDLayout, cluster: ClusterSpec, elem_size: int):
    shape = layout.desc.shape
    n_in = block_bytes(layout, elem_size)
    for a in range(len(shape)):
        for b in range(len(shape)):
            prim = _classify(a, b)
            if prim is None:
                continue
            for k in _divisors(shape[a]):
                if b >= 2:
                    lo, hi = layout.base[b - 2]
                    if (hi - lo) % (shape[b] * k):
                        continue
                after, groups = move_axis(layout, a, b, k)
                cost = max(intra_cost(prim, k, n_in, cluster.link(g)) for g in groups)
                yield CommStep(prim, k, a, b, groups, cost, layout, after)


def inter_successors(layout: RVDLayout, peers: Sequence[int], cluster: ClusterSpec,
                     elem_size: int):
    """Cross-group edges from the producer group onto ``peers``."""
    n = block_bytes(layout, elem_size)
    shape = layout.desc.shape
    size = layout.desc.size
    link = cluster.link(list(layout.grid) + list(peers))
    if len(peers) % size == 0:
        m = len(peers) // size
        # group-copy: every source block copied to m peers, replica axis grows
        new = np.empty((shape[0] * m,) + shape[1:], dtype=np.int64)
        transfers = {}
        for flat, dev in enumerate(layout.grid):
            slot = np.unravel_index(flat, shape)
            for j in range(m):
                peer = peers[flat * m + j]
                new[(slot[0] * m + j,) + tuple(slot[1:])] = peer
                transfers[peer] = (dev, None)
        desc = RVDDescriptor(shape[0] * m, shape[1], shape[2:])
        after = RVDLayout(desc, tuple(int(x) for x in new.ravel()), layout.base, 1)
        cost = m * n / link.bandwidth + link.latency
        groups = [[dev] + list(peers[f * m:(f + 1) * m]) for f, dev in enumerate(layout.grid)]
        step = CommStep("group-copy", m, None, None, groups, cost, layout, after)
        step.transfers = {p: [(s, after.mask_of(p).region)] for p, (s, _) in transfers.items()}
        yield step
        # rd-scatter: k chunks of each source block along one dim to k peers
        k = m
        if k > 1:
            for b in range(2, len(shape)):
                lo, hi = layout.base[b - 2]
                if (hi - lo) % (shape[b] * k):
                    continue
                new_shape = list(shape)
                new_shape[b] *= k
                new = np.empty(new_shape, dtype=np.int64)
                transfers = {}
                for flat, dev in enumerate(layout.grid):
                    slot = list(np.unravel_index(flat, shape))
                    for c in range(k):
                        peer = peers[flat * k + c]
                        s2 = list(slot)
                        s2[b] = slot[b] * k + c
                        new[tuple(s2)] = peer
                        transfers[peer] = dev
                desc = RVDDescriptor(new_shape[0], new_shape[1], tuple(new_shape[2:]))
                after = RVDLayout(desc, tuple(int(x) for x in new.ravel()), layout.base, 1)
                cost = n / link.bandwidth + link.latency
                groups = [[dev] + list(peers[f * k:(f + 1) * k])
                          for f, dev in enumerate(layout.grid)]
                step = CommStep("rd-scatter", k, None, b, groups, cost, layout, after)
                step.transfers = {p: [(s, after.mask_of(p).region)] for p, s in transfers.items()}
                yield step
    elif size % len(peers) == 0:
        m = size // len(peers)
        if shape[0] % m:
            return
        # shrink onto a smaller group: one replica out of every m crosses
        new_shape = (shape[0] // m,) + shape[1:]
        new = np.empty(new_shape, dtype=np.int64)
        transfers = {}
        for flat in range(len(peers)):
            slot = np.unravel_index(flat, new_shape)
            src_slot = (slot[0] * m,) + tuple(slot[1:])
            src = int(layout.array()[src_slot])
            new[slot] = peers[flat]
            transfers[peers[flat]] = src
        desc = RVDDescriptor(new_shape[0], new_shape[1], tuple(new_shape[2:]))
        after = RVDLayout(desc, tuple(int(x) for x in new.ravel()), layout.base, 1)
        cost = n / link.bandwidth + link.latency
        groups = [[s, p] for p, s in sorted(transfers.items())]
        step = CommStep("group-copy", 1, None, None, groups, cost, layout, after)
        step.transfers = {p: [(s, after.mask_of(p).region)] for p, s in transfers.items()}
        yield step


def relabel_step(cur: RVDLayout, dst: RVDLayout, cluster: ClusterSpec,
                 elem_size: int) -> Optional[CommStep]:
    """Zero-cost if every device already holds its target block, else a copy step."""
    have = cur.content()
    want = dst.content()
    if have == want:
        return None
    holders: Dict[Tuple, List[int]] = {}
    for dev, c in sorted(have.items()):
        holders.setdefault(c, []).append(dev)
    n = block_bytes(cur, elem_size)
    cost, groups, transfers = 0.0, [], {}
    for dev, c in sorted(want.items()):
        if have.get(dev) == c:
            transfers[dev] = [(dev, dst.mask_of(dev).region)]
            continue
        cands = holders[c]
        src = min(cands, key=lambda s: (cluster.link([s, dev]) is not cluster.intra, s))
        cost = max(cost, cluster.link([src, dev]).time(n))
        groups.append([src, dev])
        transfers[dev] = [(src, dst.mask_of(dev).region)]
    step = CommStep("group-copy", 1, None, None, groups, cost, cur, dst, relabel=True)
    step.transfers = transfers
    return step


def _fill_transfers(step: CommStep) -> CommStep:
    if not step.transfers:
        step.transfers = _transfers(step.primitive, step.before, step.after, step.groups)
    return step


def search(src: RVDLayout, dst: RVDLayout, cluster: ClusterSpec, elem_size: int = 4,
           max_states: int = MAX_STATES) -> CommPlan:
    """Dijkstra from ``src`` to ``dst`` (same base); inter-group if device sets are disjoint."""
    if src.base != dst.base:
        raise CommPlanError("producer and consumer layouts cover different regions")
    sdev, ddev = set(src.grid), set(dst.grid)
    if sdev == ddev:
        src = RVDLayout(src.desc, src.grid, src.base, 1)
        inter = False
    elif sdev.isdisjoint(ddev):
        src = RVDLayout(src.desc, src.grid, src.base, 0)
        inter = True
    else:
        raise CommPlanError("producer and consumer device groups partially overlap")
    dst = RVDLayout(dst.desc, dst.grid, dst.base, 1)
    peers = list(dst.grid) if inter else None
    if inter:
        peers = sorted(peers)

    tie = itertools.count()
    best: Dict[tuple, float] = {src.key(): 0.0}
    parent: Dict[tuple, Tuple[Optional[tuple], Optional[CommStep]]] = {src.key(): (None, None)}
    layouts = {src.key(): src}
    heap = [(0.0, next(tie), src.key(), False)]
    while heap:
        cost, _, key, final = heapq.heappop(heap)
        if final:
            steps = []
            cur = key
            tail = parent[("goal",) + key][1]
            if tail is not None:
                steps.append(tail)
            while parent[cur][0] is not None:
                prev, step = parent[cur]
                steps.append(step)
                cur = prev
            steps.reverse()
            return CommPlan([_fill_transfers(s) for s in steps], cost)
        if cost > best.get(key, math.inf):
            continue
        lay = layouts[key]
        if lay.side == 1 and lay.desc == dst.desc:
            rl = relabel_step(lay, dst, cluster, elem_size)
            total = cost + (rl.cost if rl else 0.0)
            gkey = ("goal",) + key
            if total < best.get(gkey, math.inf):
                best[gkey] = total
                parent[gkey] = (key, rl)
                heapq.heappush(heap, (total, next(tie), key, True))
        succ = list(intra_successors(lay, cluster, elem_size))
        if inter and lay.side == 0:
            succ += list(inter_successors(lay, peers, cluster, elem_size))
        for step in succ:
            nk = step.after.key()
            nc = cost + step.cost
            if nc < best.get(nk, math.inf):
                best[nk] = nc
                parent[nk] = (key, step)
                layouts[nk] = step.after
                heapq.heappush(heap, (nc, next(tie), nk, False))
        if len(layouts) > max_states:
            raise CommPlanError(f"RVD search exceeded {max_states} states")
    raise CommPlanError(f"no RVD path from {src} to {dst}")


def canonical_pair(src: RVDDescriptor, dst: RVDDescriptor, shape: Sequence[int],
                   src_devices: Sequence[int], dst_devices: Optional[Sequence[int]] = None):
    base = full_region(shape)
    dst_devices = list(src_devices) if dst_devices is None else list(dst_devices)
    return (RVDLayout.canonical(src, list(src_devices), base),
            RVDLayout.canonical(dst, dst_devices, base))


def search_intra(src: RVDDescriptor, dst: RVDDescriptor, cluster: ClusterSpec,
                 shape: Sequence[int], devices: Optional[Sequence[int]] = None,
                 elem_size: int = 4) -> CommPlan:
    devices = list(devices) if devices is not None else list(range(src.size))
    a, b = canonical_pair(src, dst, shape, devices)
    return search(a, b, cluster, elem_size)


def search_inter(src: RVDDescriptor, src_devices: Sequence[int], dst: RVDDescriptor,
                 dst_devices: Sequence[int], cluster: ClusterSpec, shape: Sequence[int],
                 elem_size: int = 4) -> CommPlan:
    if set(src_devices) == set(dst_devices):
        return search_intra(src, dst, cluster, shape, src_devices, elem_size)
    a, b = canonical_pair(src, dst, shape, src_devices, dst_devices)
    return search(a, b, cluster, elem_size)


def transition_rules(layout: RVDLayout, cluster: ClusterSpec, elem_size: int = 4):
    """Every single-step intra successor as (step, successor layout)."""
    return [(s, s.after) for s in intra_successors(layout, cluster, elem_size)]


def transition_listing(layout: RVDLayout, cluster: ClusterSpec, elem_size: int = 4) -> str:
    return "\n".join(s.describe() for s, _ in transition_rules(layout, cluster, elem_size))


def inter_group_bytes(plan: CommPlan, cluster: ClusterSpec, elem_size: int = 4) -> float:
    """Bytes crossing server groups over the whole plan."""
    total = 0.0
    for step in plan.steps:
        _fill_transfers(step)
        for dev, srcs in step.transfers.items():
            for s, region in srcs:
                if cluster.device(s).group != cluster.device(dev).group:
                    total += elem_size * math.prod(hi - lo for lo, hi in region)
    return total

"""Graph document builders for the example models and randomized test graphs."""

from __future__ import annotations

import math
import random
from typing import Any, Dict, List, Optional, Sequence

from .graph import default_flops, infer_output_shapes


class DocBuilder:
    """Accumulates pTensors and ops into a graph document."""

    def __init__(self, name: str, elem_size: int = 4):
        self.name = name
        self.elem_size = elem_size
        self.ptensors: List[Dict[str, Any]] = []
        self.ops: List[Dict[str, Any]] = []
        self.shapes: Dict[str, tuple] = {}

    def tensor(self, pid: str, shape: Sequence[int], kind: str = "activation",
               grad_of: Optional[str] = None) -> str:
        doc = {"id": pid, "shape": list(shape), "elem_size": self.elem_size, "kind": kind}
        if grad_of:
            doc["grad_of"] = grad_of
        self.ptensors.append(doc)
        self.shapes[pid] = tuple(shape)
        return pid

    def op(self, oid: str, kind: str, inputs: Sequence[str], out: str,
           out_kind: str = "activation", direction: str = "forward",
           grad_of: Optional[str] = None, backward_of: Optional[str] = None,
           flops: Optional[float] = None, **attrs) -> str:
        in_shapes = [self.shapes[p] for p in inputs]
        (shape,) = infer_output_shapes(kind, attrs, in_shapes)
        if out not in self.shapes:
            self.tensor(out, shape, out_kind, grad_of)
        if flops is None:
            flops = default_flops(kind, attrs, in_shapes, [shape])
        doc = {"id": oid, "kind": kind, "inputs": list(inputs), "outputs": [out],
               "direction": direction, "flops": float(flops)}
        if backward_of:
            doc["backward_of"] = backward_of
        if attrs:
            doc["attrs"] = attrs
        self.ops.append(doc)
        return out

    def linear(self, name: str, x: str, w: str, layer: int, backward: bool,
               grad_out: Optional[str], need_dx: bool, **extra):
        """y = x @ w; optionally dW = x^T dy, dx = dy w^T paired with the forward op."""
        y = self.op(f"{name}", "matmul", [x, w], f"{name}.y", layer=layer,
                    batch_dim=[0, 0], **extra)
        grads = {}
        if backward and grad_out is not None:
            grads["w"] = self.op(f"{name}.dw", "matmul", [x, grad_out], f"d{w}",
                                 out_kind="gradient", grad_of=w, direction="backward",
                                 backward_of=name, trans_a=True, layer=layer, **extra)
            if need_dx:
                grads["x"] = self.op(f"{name}.dx", "matmul", [grad_out, w], f"{name}.dx.y",
                                     out_kind="gradient", grad_of=x, direction="backward",
                                     backward_of=name, trans_b=True, layer=layer, **extra)
        return y, grads

    def document(self) -> Dict[str, Any]:
        return {"name": self.name, "ptensors": list(self.ptensors), "ops": list(self.ops)}


def mlp(batch: int = 4, dims: Sequence[int] = (4, 4, 4), backward: bool = True,
        optimizer: bool = True, flops_per_layer: Optional[float] = None,
        act_mb: int = 4, name: str = "mlp") -> Dict[str, Any]:
    """Stack of linear layers with a chained backward pass and SGD-style updates."""
    b = DocBuilder(name, act_mb)
    h = b.tensor("x", (batch, dims[0]))
    weights, acts = [], [h]
    nl = len(dims) - 1
    for i in range(nl):
        w = b.tensor(f"w{i}", (dims[i], dims[i + 1]), "weight")
        weights.append(w)
        h = b.op(f"fc{i}", "matmul", [h, w], f"h{i + 1}", layer=i, batch_dim=[0, 0],
                 flops=flops_per_layer)
        acts.append(h)
    if backward:
        g = b.tensor(f"dh{nl}", (batch, dims[-1]), "gradient", grad_of=f"h{nl}")
        for i in reversed(range(nl)):
            b.op(f"fc{i}.dw", "matmul", [acts[i], g], f"dw{i}", out_kind="gradient",
                 grad_of=weights[i], direction="backward", backward_of=f"fc{i}",
                 trans_a=True, layer=i, flops=flops_per_layer)
            if i > 0:
                g = b.op(f"fc{i}.dx", "matmul", [g, weights[i]], f"dh{i}", out_kind="gradient",
                         grad_of=acts[i], direction="backward", backward_of=f"fc{i}",
                         trans_b=True, layer=i, flops=flops_per_layer)
        if optimizer:
            for i, w in enumerate(weights):
                b.op(f"opt{i}", "elementwise", [w, f"dw{i}"], f"{w}.new", out_kind="weight",
                     direction="optimizer", fn="sub", layer=i)
    return b.document()


def pipeline_model(layers: int = 4, batch: int = 8, hidden: int = 4,
                   stage_flops: float = 1e12) -> Dict[str, Any]:
    """Equal-cost linear layers; each backward op costs twice its forward."""
    doc = mlp(batch, [hidden] * (layers + 1), backward=True, optimizer=False,
              name="pipeline")
    for op in doc["ops"]:
        op["flops"] = stage_flops
        # layer 0 has no dx op; its weight-gradient op carries the full backward cost
        if op["id"] == "fc0.dw":
            op["flops"] = 2 * stage_flops
    return doc


def three_pass_model(layers: int = 2, batch: int = 4, hidden: int = 4,
                     flops: float = 1e12) -> Dict[str, Any]:
    """Three chained forward passes over shared weights; only the last one is trained."""
    b = DocBuilder("three_pass")
    h = b.tensor("x", (batch, hidden))
    ws = [b.tensor(f"w{i}", (hidden, hidden), "weight") for i in range(layers)]
    acts: Dict[tuple, str] = {}
    for p in (1, 2, 3):
        for i in range(layers):
            acts[(p, i)] = h
            h = b.op(f"p{p}.fc{i}", "matmul", [h, ws[i]], f"p{p}.h{i + 1}", layer=i,
                     batch_dim=[0, 0], flops=flops, **{"pass": p})
    g = b.tensor(f"dp3.h{layers}", (batch, hidden), "gradient", grad_of=h)
    for i in reversed(range(layers)):
        x = acts[(3, i)]
        b.op(f"p3.fc{i}.dw", "matmul", [x, g], f"dw{i}", out_kind="gradient", grad_of=ws[i],
             direction="backward", backward_of=f"p3.fc{i}", trans_a=True, layer=i,
             flops=flops, **{"pass": 3})
        if i > 0:
            g = b.op(f"p3.fc{i}.dx", "matmul", [g, ws[i]], f"d{x}", out_kind="gradient",
                     grad_of=x, direction="backward", backward_of=f"p3.fc{i}", trans_b=True,
                     layer=i, flops=flops, **{"pass": 3})
    return b.document()


def coshard_block(batch: int = 4, hidden: int = 4, inner: int = 16,
                  name: str = "coshard") -> Dict[str, Any]:
    """x -> a = x@Wa (wide activation) -> o = a@Wb, with backward and updates.

    ``expand`` is the op whose activation dominates memory."""
    b = DocBuilder(name)
    x = b.tensor("x", (batch, hidden))
    wa = b.tensor("wa", (hidden, inner), "weight")
    wb = b.tensor("wb", (inner, hidden), "weight")
    a = b.op("expand", "matmul", [x, wa], "a", layer=0, batch_dim=[0, 0], shard_dim=[1, 1])
    o = b.op("project", "matmul", [a, wb], "o", layer=0, batch_dim=[0, 0], shard_dim=[0, 1])
    do = b.tensor("do", (batch, hidden), "gradient", grad_of=o)
    b.op("project.dw", "matmul", [a, do], "dwb", out_kind="gradient", grad_of=wb,
         direction="backward", backward_of="project", trans_a=True, layer=0)
    da = b.op("project.dx", "matmul", [do, wb], "da", out_kind="gradient", grad_of=a,
              direction="backward", backward_of="project", trans_b=True, layer=0)
    b.op("expand.dw", "matmul", [x, da], "dwa", out_kind="gradient", grad_of=wa,
         direction="backward", backward_of="expand", trans_a=True, layer=0)
    b.op("opt.wa", "elementwise", [wa, "dwa"], "wa.new", out_kind="weight",
         direction="optimizer", fn="sub")
    b.op("opt.wb", "elementwise", [wb, "dwb"], "wb.new", out_kind="weight",
         direction="optimizer", fn="sub")
    return b.document()


def embed_transformer(layers: int = 2, batch: int = 4, hidden: int = 4, vocab: int = 8,
                      flops: float = 1e12) -> Dict[str, Any]:
    """Embedding lookup, linear layers, and a tied output projection.

    The embedding table is frozen (no table gradient); ops touching it carry
    ``role: embedding``."""
    b = DocBuilder("embed_transformer")
    ids = b.tensor("ids", (batch,))
    table = b.tensor("table", (vocab, hidden), "weight")
    h = b.op("embed", "embedding-lookup", [ids, table], "h0", role="embedding",
             batch_dim=[0, 0], flops=flops / 4)
    acts, ws = [h], []
    for i in range(layers):
        w = b.tensor(f"w{i}", (hidden, hidden), "weight")
        ws.append(w)
        h = b.op(f"fc{i}", "matmul", [h, w], f"h{i + 1}", layer=i, batch_dim=[0, 0], flops=flops)
        acts.append(h)
    logits = b.op("head", "matmul", [h, table], "logits", role="embedding", batch_dim=[0, 0],
                  trans_b=True, flops=flops / 4)
    dl = b.tensor("dlogits", (batch, vocab), "gradient", grad_of=logits)
    g = b.op("head.dx", "matmul", [dl, table], f"dh{layers}", out_kind="gradient",
             grad_of=h, direction="backward", backward_of="head", role="embedding",
             flops=flops / 4)
    for i in reversed(range(layers)):
        b.op(f"fc{i}.dw", "matmul", [acts[i], g], f"dw{i}", out_kind="gradient", grad_of=ws[i],
             direction="backward", backward_of=f"fc{i}", trans_a=True, layer=i, flops=flops)
        if i > 0:
            g = b.op(f"fc{i}.dx", "matmul", [g, ws[i]], f"dh{i}", out_kind="gradient",
                     grad_of=acts[i], direction="backward", backward_of=f"fc{i}",
                     trans_b=True, layer=i, flops=flops)
    return b.document()


def random_graph(rng: random.Random, batch: int, max_ops: int = 12) -> Dict[str, Any]:
    """Random small forward(+backward) graph; every forward op splits on dim 0."""
    b = DocBuilder(f"rand{rng.randrange(10**6)}")
    width = rng.choice([2, 4])
    acts: List[str] = []
    if rng.random() < 0.3:
        ids = b.tensor("ids", (batch,))
        table = b.tensor("table", (rng.choice([2, 4]), width), "weight")
        acts.append(b.op("embed", "embedding-lookup", [ids, table], "e0", batch_dim=[0, 0],
                         layer=0))
    else:
        acts.append(b.tensor("x", (batch, width)))
    budget = max_ops - len(b.ops)
    n = 0
    while budget > 0:
        n += 1
        layer = n
        choice = rng.random()
        src = rng.choice(acts[-2:])
        if choice < 0.45 and budget >= 1:
            w_out = rng.choice([2, 4])
            w = b.tensor(f"w{n}", (b.shapes[src][1], w_out), "weight")
            want_bw = budget >= 3 and rng.random() < 0.5
            gy = None
            if want_bw:
                gy = b.tensor(f"g{n}", (batch, w_out), "gradient", grad_of=f"fc{n}.y")
            y, grads = b.linear(f"fc{n}", src, w, layer, want_bw, gy, need_dx=True)
            if want_bw:
                b.op(f"opt{n}", "elementwise", [w, grads["w"]], f"{w}.new", out_kind="weight",
                     direction="optimizer", fn="sub", layer=layer)
            acts.append(y)
        elif choice < 0.75:
            same = [a for a in acts if b.shapes[a] == b.shapes[src] and a != src]
            other = rng.choice(same) if same else b.tensor(f"c{n}", b.shapes[src])
            acts.append(b.op(f"ew{n}", "elementwise", [src, other], f"ew{n}.y",
                             fn=rng.choice(["add", "sub", "mul", "max"]), batch_dim=[0, 0],
                             layer=layer))
        elif choice < 0.9:
            acts.append(b.op(f"id{n}", "identity", [src], f"id{n}.y", batch_dim=[0, 0],
                             layer=layer))
        else:
            b.op(f"sum{n}", "reduce-op", [src], f"sum{n}.y", dim=1, batch_dim=[0, 0],
                 layer=layer)
        budget = max_ops - len(b.ops)
    return b.document()


def model_catalog() -> Dict[str, Any]:
    return {
        "mlp": mlp,
        "pipeline": pipeline_model,
        "three_pass": three_pass_model,
        "coshard": coshard_block,
        "embed_transformer": embed_transformer,
    }


def total_flops(doc: Dict[str, Any]) -> float:
    return math.fsum(op["flops"] for op in doc["ops"])

"""Operator-level graph representation of a network.

A :class:`TraceGraph` is a DAG whose vertices are operators and whose edges
carry tensors.  Edges are ordered per destination by an input slot, which
matters for ``Concat``.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping


class GraphError(ValueError):
    """Raised for malformed graphs and model descriptions."""


class CycleError(GraphError):
    def __init__(self, cycle: list[str]):
        self.cycle = cycle
        super().__init__(f"cycle detected: {' -> '.join(cycle + cycle[:1])}")


@dataclass(frozen=True)
class OpKind:
    name: str
    is_joint: bool = False
    has_params: bool = False


OP_KINDS: dict[str, OpKind] = {
    k.name: k
    for k in (
        OpKind("Conv2d", has_params=True),
        OpKind("Linear", has_params=True),
        OpKind("BatchNorm", has_params=True),
        OpKind("ReLU"),
        OpKind("MaxPool"),
        OpKind("AvgPool"),
        OpKind("GlobalAvgPool"),
        OpKind("Add", is_joint=True),
        OpKind("Concat", is_joint=True),
        OpKind("Flatten"),
        OpKind("Input"),
        OpKind("Output"),
    )
}

# name -> (required attrs, optional attrs with defaults)
ATTR_SCHEMA: dict[str, tuple[tuple[str, ...], dict[str, Any]]] = {
    "Conv2d": (("in_channels", "out_channels", "kernel", "stride", "padding"), {"bias": True}),
    "Linear": (("in_features", "out_features"), {"bias": True}),
    "BatchNorm": (("num_features",), {"relu": False, "momentum": 0.1, "eps": 1e-5}),
    "ReLU": ((), {}),
    "MaxPool": (("kernel", "stride", "padding"), {}),
    "AvgPool": (("kernel", "stride", "padding"), {}),
    "GlobalAvgPool": ((), {}),
    "Add": ((), {}),
    "Concat": ((), {"axis": 1}),
    "Flatten": ((), {}),
    "Input": (("shape",), {}),
    "Output": ((), {}),
}


@dataclass(frozen=True)
class ParamSpec:
    """One parameter tensor attached to a vertex."""

    name: str
    role: str
    shape: tuple[int, ...]
    trainable: bool = True

    @property
    def size(self) -> int:
        n = 1
        for d in self.shape:
            n *= d
        return n


@dataclass(frozen=True)
class Vertex:
    id: str
    op: str
    attrs: Mapping[str, Any] = field(default_factory=dict)

    @property
    def kind(self) -> OpKind:
        return OP_KINDS[self.op]

    @property
    def params(self) -> tuple[ParamSpec, ...]:
        return param_specs(self)


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    slot: int


def param_specs(v: Vertex) -> tuple[ParamSpec, ...]:
    a = v.attrs
    p = v.id + "."
    if v.op == "Conv2d":
        specs = [ParamSpec(p + "weight", "weight",
                           (a["out_channels"], a["in_channels"], a["kernel"], a["kernel"]))]
        if a.get("bias", True):
            specs.append(ParamSpec(p + "bias", "bias", (a["out_channels"],)))
        return tuple(specs)
    if v.op == "Linear":
        specs = [ParamSpec(p + "weight", "weight", (a["out_features"], a["in_features"]))]
        if a.get("bias", True):
            specs.append(ParamSpec(p + "bias", "bias", (a["out_features"],)))
        return tuple(specs)
    if v.op == "BatchNorm":
        c = (a["num_features"],)
        return (
            ParamSpec(p + "weight", "weight", c),
            ParamSpec(p + "bias", "bias", c),
            ParamSpec(p + "running_mean", "running_mean", c, trainable=False),
            ParamSpec(p + "running_var", "running_var", c, trainable=False),
        )
    return ()


class TraceGraph:
    """Validated operator DAG.

    Treat instances as immutable; every transformation builds a new graph.
    """

    def __init__(self, vertices: Iterable[Vertex], edges: Iterable[Edge],
                 inputs: Iterable[str], outputs: Iterable[str], validate: bool = True):
        self.vertices: dict[str, Vertex] = {}
        for v in vertices:
            if v.id in self.vertices:
                raise GraphError(f"duplicate vertex id {v.id!r}")
            self.vertices[v.id] = v
        self.edges: list[Edge] = list(edges)
        self.inputs: list[str] = list(inputs)
        self.outputs: list[str] = list(outputs)
        self._succ: dict[str, list[str]] = {k: [] for k in self.vertices}
        self._pred: dict[str, list[Edge]] = {k: [] for k in self.vertices}
        for e in self.edges:
            for end in (e.src, e.dst):
                if end not in self.vertices:
                    raise GraphError(f"edge {e.src}->{e.dst} references undeclared vertex {end!r}")
            self._succ[e.src].append(e.dst)
            self._pred[e.dst].append(e)
        for k in self._pred:
            self._pred[k].sort(key=lambda e: e.slot)
        if validate:
            self._validate()

    # -- structure -----------------------------------------------------------
    def successors(self, vid: str) -> list[str]:
        return self._succ[vid]

    def in_edges(self, vid: str) -> list[Edge]:
        """Incoming edges ordered by input slot."""
        return self._pred[vid]

    def predecessors(self, vid: str) -> list[str]:
        return [e.src for e in self._pred[vid]]

    def is_joint(self, vid: str) -> bool:
        return self.vertices[vid].kind.is_joint

    def param_specs(self) -> list[ParamSpec]:
        """All parameter specs in topological order, role order within a vertex."""
        return [s for vid in topo_order(self) for s in self.vertices[vid].params]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TraceGraph):
            return NotImplemented
        return (
            self.vertices == other.vertices
            and sorted(self.edges, key=_edge_key) == sorted(other.edges, key=_edge_key)
            and self.inputs == other.inputs
            and self.outputs == other.outputs
        )

    def __repr__(self) -> str:
        return f"TraceGraph({len(self.vertices)} vertices, {len(self.edges)} edges)"

    def _validate(self) -> None:
        for vid in self.inputs:
            if vid not in self.vertices or self.vertices[vid].op != "Input":
                raise GraphError(f"declared input {vid!r} is not an Input vertex")
        for vid in self.outputs:
            if vid not in self.vertices or self.vertices[vid].op != "Output":
                raise GraphError(f"declared output {vid!r} is not an Output vertex")
        for vid, v in self.vertices.items():
            if v.op not in OP_KINDS:
                raise GraphError(f"vertex {vid!r}: unknown op kind {v.op!r}")
            if v.op == "Input" and vid not in self.inputs:
                raise GraphError(f"Input vertex {vid!r} not listed in inputs")
            if v.op == "Output" and vid not in self.outputs:
                raise GraphError(f"Output vertex {vid!r} not listed in outputs")
            preds = self._pred[vid]
            if v.op == "Input":
                if preds:
                    raise GraphError(f"Input vertex {vid!r} has incoming edges")
            elif v.kind.is_joint:
                if len(preds) < 2:
                    raise GraphError(f"joint vertex {vid!r} needs >=2 inputs, has {len(preds)}")
            elif len(preds) != 1:
                raise GraphError(f"vertex {vid!r} ({v.op}) needs exactly 1 input, has {len(preds)}")
            slots = [e.slot for e in preds]
            if slots != list(range(len(slots))):
                raise GraphError(f"vertex {vid!r}: input slots {slots} are not 0..n-1")
            if v.op != "Output" and not self._succ[vid]:
                raise GraphError(f"vertex {vid!r} has no outgoing edge")
            if v.op == "Output" and self._succ[vid]:
                raise GraphError(f"Output vertex {vid!r} has outgoing edges")
        topo_order(self)  # raises on cycles
        if not any(v.kind.has_params for v in self.vertices.values()):
            raise GraphError("no trainable operator in graph")


def _edge_key(e: Edge) -> tuple[str, int, str]:
    return (e.dst, e.slot, e.src)


def topo_order(g: TraceGraph) -> list[str]:
    """Kahn's algorithm; ties broken by lexicographic vertex id."""
    indeg = {k: len(g.in_edges(k)) for k in g.vertices}
    heap = [k for k, d in indeg.items() if d == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        k = heapq.heappop(heap)
        order.append(k)
        for s in g.successors(k):
            indeg[s] -= 1
            if indeg[s] == 0:
                heapq.heappush(heap, s)
    if len(order) != len(g.vertices):
        raise CycleError(_find_cycle(g, {k for k, d in indeg.items() if d > 0}))
    return order


def _find_cycle(g: TraceGraph, remaining: set[str]) -> list[str]:
    # every vertex left over by Kahn has a predecessor among the leftovers,
    # so walking predecessors must revisit a vertex
    start = min(remaining)
    seen: dict[str, int] = {}
    path = []
    v = start
    while v not in seen:
        seen[v] = len(path)
        path.append(v)
        v = min(p for p in g.predecessors(v) if p in remaining)
    cycle = path[seen[v]:]
    cycle.reverse()
    return cycle

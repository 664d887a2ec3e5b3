"""Shape inference and parameter / FLOP accounting.

Shapes are per sample: ``(C, H, W)`` for feature maps, ``(F,)`` for vectors.
FLOP convention: Conv2d and Linear count ``2 * MAC`` plus one op per output
element for the bias; BatchNorm, ReLU and Add count one op per output
element; pools count the window size per output element; Concat, Flatten,
Input and Output are free.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .ir import GraphError, TraceGraph, topo_order


class ShapeError(GraphError):
    pass


@dataclass
class ShapeMap:
    shapes: dict[str, tuple[int, ...]]
    # concat vertex id -> [(src vertex id, slot, start channel, stop channel)]
    concat_ranges: dict[str, list[tuple[str, int, int, int]]] = field(default_factory=dict)

    def __getitem__(self, vid: str) -> tuple[int, ...]:
        return self.shapes[vid]


def _window_out(n: int, k: int, s: int, p: int, vid: str) -> int:
    out = (n + 2 * p - k) // s + 1
    if out < 1:
        raise ShapeError(f"vertex {vid!r}: window {k} larger than padded input {n + 2 * p}")
    return out


def infer_shapes(g: TraceGraph, input_shape: tuple[int, ...] | list[int] | None = None) -> ShapeMap:
    """Propagate per-sample shapes through ``g``.

    ``input_shape`` overrides the declared shape of the (single) input.
    """
    shapes: dict[str, tuple[int, ...]] = {}
    ranges: dict[str, list[tuple[str, int, int, int]]] = {}
    for vid in topo_order(g):
        v = g.vertices[vid]
        a = v.attrs
        ins = [shapes[s] for s in g.predecessors(vid)]
        op = v.op
        if op == "Input":
            shp = tuple(input_shape) if input_shape is not None and len(g.inputs) == 1 else tuple(a["shape"])
            if len(shp) != len(a["shape"]):
                raise ShapeError(f"input {vid!r}: expected rank {len(a['shape'])}, got {shp}")
            out = shp
        elif op == "Conv2d":
            x = ins[0]
            if len(x) != 3 or x[0] != a["in_channels"]:
                raise ShapeError(f"vertex {vid!r}: Conv2d expects ({a['in_channels']}, H, W), got {x}")
            k, s, p = a["kernel"], a["stride"], a["padding"]
            out = (a["out_channels"], _window_out(x[1], k, s, p, vid), _window_out(x[2], k, s, p, vid))
        elif op == "Linear":
            x = ins[0]
            if len(x) != 1 or x[0] != a["in_features"]:
                raise ShapeError(f"vertex {vid!r}: Linear expects ({a['in_features']},), got {x}")
            out = (a["out_features"],)
        elif op == "BatchNorm":
            x = ins[0]
            if x[0] != a["num_features"]:
                raise ShapeError(f"vertex {vid!r}: BatchNorm expects {a['num_features']} channels, got {x}")
            out = x
        elif op in ("MaxPool", "AvgPool"):
            x = ins[0]
            if len(x) != 3:
                raise ShapeError(f"vertex {vid!r}: {op} expects a (C, H, W) input, got {x}")
            k, s, p = a["kernel"], a["stride"], a["padding"]
            out = (x[0], _window_out(x[1], k, s, p, vid), _window_out(x[2], k, s, p, vid))
        elif op == "GlobalAvgPool":
            x = ins[0]
            if len(x) != 3:
                raise ShapeError(f"vertex {vid!r}: GlobalAvgPool expects (C, H, W), got {x}")
            out = (x[0],)
        elif op == "Flatten":
            n = 1
            for d in ins[0]:
                n *= d
            out = (n,)
        elif op == "Add":
            if any(x != ins[0] for x in ins):
                raise ShapeError(f"vertex {vid!r}: Add inputs disagree: {ins}")
            out = ins[0]
        elif op == "Concat":
            rest = ins[0][1:]
            if any(x[1:] != rest for x in ins):
                raise ShapeError(f"vertex {vid!r}: Concat inputs disagree off the channel axis: {ins}")
            start = 0
            rs = []
            for e, x in zip(g.in_edges(vid), ins):
                rs.append((e.src, e.slot, start, start + x[0]))
                start += x[0]
            ranges[vid] = rs
            out = (start,) + rest
        else:  # ReLU, Output
            out = ins[0]
        shapes[vid] = tuple(out)
    return ShapeMap(shapes, ranges)


def count_params(g: TraceGraph) -> int:
    return sum(s.size for v in g.vertices.values() for s in v.params if s.trainable)


def _numel(shape: tuple[int, ...]) -> int:
    n = 1
    for d in shape:
        n *= d
    return n


def vertex_flops(g: TraceGraph, s: ShapeMap, vid: str) -> int:
    v = g.vertices[vid]
    a = v.attrs
    out = _numel(s[vid])
    if v.op == "Conv2d":
        mac = out * a["in_channels"] * a["kernel"] ** 2
        return 2 * mac + (out if a.get("bias", True) else 0)
    if v.op == "Linear":
        mac = a["in_features"] * a["out_features"]
        return 2 * mac + (a["out_features"] if a.get("bias", True) else 0)
    if v.op in ("BatchNorm", "ReLU", "Add"):
        return out * (2 if v.op == "BatchNorm" and a.get("relu") else 1)
    if v.op in ("MaxPool", "AvgPool"):
        return out * a["kernel"] ** 2
    if v.op == "GlobalAvgPool":
        c, h, w = s[g.predecessors(vid)[0]]
        return c * h * w
    return 0


def count_flops(g: TraceGraph, s: ShapeMap) -> int:
    return sum(vertex_flops(g, s, vid) for vid in g.vertices)

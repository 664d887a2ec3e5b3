"""Sub-network construction from a solution with zeroed removal structures.

Three passes:

1. delete every vertex of a zero segment;
2. erase the input slices of surviving consumers whose channels came from a
   deleted segment (tracked symbolically through Concat, BatchNorm,
   parameter-free ops and Flatten);
3. repeat until stable: delete vertices cut off from every input or output,
   and rewire joints left with one input to that input.

Because a zero segment emits an all-zero tensor, the constructed network
computes the same eval-mode outputs as the zeroed full network.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .engine import ParamStore, predict
from .ir import Edge, GraphError, TraceGraph, Vertex, topo_order
from .search_space import GroupPartition, SegmentGraph, reachable, removal_validity
from .shapes import count_flops, count_params, infer_shapes

log = logging.getLogger(__name__)


class SurgeryError(GraphError):
    pass


@dataclass
class SurgeryPlan:
    pass1: list[str]
    # vertex id -> input-channel (or feature) ranges to erase, half-open, 0-based
    pass2: dict[str, list[tuple[int, int]]]
    # vertex id -> "unnecessary" (single-input joint) or "isolated"
    pass3: dict[str, str]
    # vertex id -> kept input indices, for every vertex listed in pass2
    keep: dict[str, np.ndarray] = field(default_factory=dict)
    # BatchNorm vertices that receive erased channels: in eval mode they map
    # the zero channels to a constant, so erasing them is not output-preserving
    lossy: list[str] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return not (self.pass1 or self.pass2 or self.pass3)

    def to_json(self) -> dict[str, Any]:
        return {"pass1": self.pass1,
                "pass2": {k: [list(r) for r in v] for k, v in self.pass2.items()},
                "pass3": self.pass3, "lossy": self.lossy}


@dataclass
class SubNetwork:
    graph: TraceGraph
    store: ParamStore
    # new tensor name -> (original tensor name, axis, kept indices along axis or None)
    provenance: dict[str, tuple[str, int, list[int] | None]]

    def provenance_json(self) -> dict[str, Any]:
        return {k: {"source": s, "axis": a, "kept": kept} for k, (s, a, kept) in self.provenance.items()}


def _ranges(mask: np.ndarray) -> list[tuple[int, int]]:
    """Half-open runs of False in ``mask``."""
    out = []
    start = None
    for i, keep in enumerate(mask):
        if not keep and start is None:
            start = i
        elif keep and start is not None:
            out.append((start, i))
            start = None
    if start is not None:
        out.append((start, len(mask)))
    return out


def _disconnected(sg: SegmentGraph, removed: set[str]) -> list[str]:
    seen = reachable(sg, removed)
    return [s for s in sg.segments if s not in removed and s not in seen]


def plan_surgery(g: TraceGraph, sg: SegmentGraph, partition: GroupPartition,
                 zero_groups) -> SurgeryPlan:
    zero_groups = list(zero_groups)
    unknown = [k for k in zero_groups if k not in partition.by_id]
    if unknown:
        raise SurgeryError(f"zero groups {unknown} are not removal structures")
    removed = {partition.segment_of(k) for k in zero_groups}
    if not removal_validity(sg, removed):
        lost_out = [o for o in g.outputs if not _output_reachable(g, sg, removed, o)]
        cut = _disconnected(sg, removed)
        what = f"output(s) {lost_out} disconnected from the input" if lost_out else \
            f"segments {cut} cut off from the input"
        raise SurgeryError(f"invalid zero-group set {sorted(zero_groups)}: {what}")

    pass1 = [m for sid in sg.segments if sid in removed for m in sg.segments[sid].members]
    gone = set(pass1)

    # pass 3: closure over isolated vertices and single-input joints
    pass3: dict[str, str] = {}
    while True:
        alive = [v for v in g.vertices if v not in gone]
        fwd = _sweep(g.inputs, lambda v: g.successors(v), gone)
        bwd = _sweep(g.outputs, lambda v: g.predecessors(v), gone)
        changed = False
        for v in alive:
            if v not in fwd or v not in bwd:
                pass3[v] = "isolated"
                gone.add(v)
                changed = True
        if changed:
            continue
        for v in alive:
            if g.is_joint(v) and v not in pass3:
                n = sum(1 for p in g.predecessors(v) if p not in gone)
                if n == 1:
                    pass3[v] = "unnecessary"
                    changed = True
        if not changed:
            break
    for v in g.outputs:
        if v in gone:
            raise SurgeryError(f"output {v!r} would be removed")

    keep = _channel_masks(g, gone, pass3)
    lossy = [v for v in keep if g.vertices[v].op == "BatchNorm"]
    if lossy:
        log.warning("erased channels pass through BatchNorm %s; sub-network is not exactly "
                    "equivalent to the zeroed network", lossy)
    pass2 = {}
    for vid, mask in keep.items():
        if not mask.all():
            pass2[vid] = _ranges(mask)
    kept = {vid: np.flatnonzero(m) for vid, m in keep.items() if not m.all()}
    return SurgeryPlan(pass1, pass2, pass3, kept, lossy)


def _output_reachable(g: TraceGraph, sg: SegmentGraph, removed: set[str], out: str) -> bool:
    seen = reachable(sg, removed)
    return any(sg.owner.get(p) in seen for p in g.predecessors(out))


def _sweep(starts, step, gone: set[str]) -> set[str]:
    seen = set(starts)
    stack = list(starts)
    while stack:
        v = stack.pop()
        for w in step(v):
            if w not in gone and w not in seen:
                seen.add(w)
                stack.append(w)
    return seen


def _channel_masks(g: TraceGraph, gone: set[str], pass3: dict[str, str]) -> dict[str, np.ndarray]:
    """Kept-input masks for every surviving vertex that reads a tensor whose
    leading (channel or feature) axis lost entries."""
    shapes = infer_shapes(g)
    out_mask: dict[str, np.ndarray] = {}
    in_mask: dict[str, np.ndarray] = {}
    for vid in topo_order(g):
        v = g.vertices[vid]
        if v.op == "Input":
            out_mask[vid] = np.ones(shapes[vid][0], dtype=bool)
            continue
        if vid in gone and pass3.get(vid) != "unnecessary":
            continue
        if v.op in ("Add", "Concat"):
            parts = []
            for e in g.in_edges(vid):
                if e.src in gone and pass3.get(e.src) != "unnecessary":
                    parts.append(None)
                else:
                    parts.append(out_mask[e.src])
            if v.op == "Concat":
                if v.attrs.get("axis", 1) != 1 and any(p is None for p in parts):
                    raise SurgeryError(f"Concat {vid!r}: only channel-axis concatenation can lose inputs")
                sizes = [shapes[e.src][0] for e in g.in_edges(vid)]
                out_mask[vid] = np.concatenate([np.zeros(n, dtype=bool) if p is None else p
                                                for p, n in zip(parts, sizes)])
            else:
                live = [p for p in parts if p is not None]
                if any(not np.array_equal(live[0], p) for p in live[1:]):
                    raise SurgeryError(f"Add {vid!r}: surviving inputs carry different channel sets")
                out_mask[vid] = live[0]
            continue
        m = out_mask[g.predecessors(vid)[0]]
        if v.op in ("Conv2d", "Linear"):
            if not m.all():
                in_mask[vid] = m
            out_mask[vid] = np.ones(shapes[vid][0], dtype=bool)
        elif v.op == "BatchNorm":
            if not m.all():
                in_mask[vid] = m
            out_mask[vid] = m
        elif v.op == "Flatten":
            src = shapes[g.predecessors(vid)[0]]
            per = int(np.prod(src[1:])) if len(src) > 1 else 1
            out_mask[vid] = np.repeat(m, per)
        else:  # pools, GAP, ReLU, Output keep the leading axis
            out_mask[vid] = m
    for vid in g.outputs:
        if not out_mask[vid].all():
            raise SurgeryError(f"output {vid!r} would lose entries")
    return in_mask


def apply_surgery(g: TraceGraph, store: ParamStore, plan: SurgeryPlan) -> SubNetwork:
    deleted = set(plan.pass1) | {v for v, why in plan.pass3.items()}
    rewired = {v for v, why in plan.pass3.items() if why == "unnecessary"}

    def source(vid: str) -> str | None:
        # follow identity rewiring through unnecessary joints
        while vid in rewired:
            live = [p for p in g.predecessors(vid) if p not in deleted or p in rewired]
            if len(live) != 1:
                raise SurgeryError(f"joint {vid!r} marked unnecessary but has {len(live)} live inputs")
            vid = live[0]
        return None if vid in deleted else vid

    vertices = []
    for vid, v in g.vertices.items():
        if vid in deleted:
            continue
        attrs = dict(v.attrs)
        if vid in plan.keep:
            n = int(plan.keep[vid].size)
            key = {"Conv2d": "in_channels", "Linear": "in_features", "BatchNorm": "num_features"}[v.op]
            attrs[key] = n
        vertices.append(Vertex(vid, v.op, attrs))
    edges = []
    for v in vertices:
        slot = 0
        for e in g.in_edges(v.id):
            src = source(e.src)
            if src is None:
                continue
            edges.append(Edge(src, v.id, slot))
            slot += 1
    try:
        sub = TraceGraph(vertices, edges, g.inputs, g.outputs)
        infer_shapes(sub)
    except GraphError as exc:
        raise SurgeryError(f"surgery produced an inconsistent graph: {exc}") from exc

    new = ParamStore.for_graph(sub, store.dtype)
    provenance: dict[str, tuple[str, int, list[int] | None]] = {}
    for spec in new.specs + new.buffer_specs:
        vid = spec.name.rsplit(".", 1)[0]
        old = store[spec.name]
        kept = plan.keep.get(vid)
        if kept is None:
            val, axis, idx = old, 0, None
        else:
            axis = 1 if g.vertices[vid].op in ("Conv2d", "Linear") and spec.role == "weight" else 0
            if g.vertices[vid].op != "BatchNorm" and spec.role == "bias":
                val, axis, idx = old, 0, None
            else:
                val, idx = np.take(old, kept, axis=axis), kept.tolist()
        new[spec.name][...] = val
        provenance[spec.name] = (spec.name, axis, idx)
    return SubNetwork(sub, new, provenance)


def equivalence_check(full_g: TraceGraph, full_store: ParamStore, sub: SubNetwork,
                      inputs: np.ndarray, batch_size: int = 256) -> float:
    """Max absolute eval-mode output difference between the two networks."""
    a = predict(full_g, full_store, inputs, batch_size)
    b = predict(sub.graph, sub.store, inputs, batch_size)
    if a.shape != b.shape:
        raise ValueError(f"output shapes differ: {a.shape} vs {b.shape}")
    return float(np.max(np.abs(a - b))) if a.size else 0.0


def report_compression(full_g: TraceGraph, sub_g: TraceGraph) -> dict[str, float]:
    pf, ps = count_params(full_g), count_params(sub_g)
    ff, fs = count_flops(full_g, infer_shapes(full_g)), count_flops(sub_g, infer_shapes(sub_g))
    return {"params_full": pf, "params_sub": ps, "param_ratio": ps / pf,
            "flops_full": ff, "flops_sub": fs, "flop_ratio": fs / ff if ff else 1.0}


def construct(g: TraceGraph, sg: SegmentGraph, partition: GroupPartition, store: ParamStore,
              zero_groups) -> tuple[SubNetwork, SurgeryPlan]:
    plan = plan_surgery(g, sg, partition, zero_groups)
    return apply_surgery(g, store, plan), plan

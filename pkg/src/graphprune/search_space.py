"""Removal-structure discovery.

The trace graph is condensed into a segment graph: starting from the
vertices fed by the graph inputs, each segment grows along single-successor,
non-joint chains and stops before a joint vertex or at (and including) a
vertex with several successors.  Joint vertices form singleton segments.
Segments that own trainable tensors and feed only joint vertices are the
removal structures; their tensors form the searchable groups ``G_s``, all
other trainable tensors form the complement group.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .ir import TraceGraph

log = logging.getLogger(__name__)

JOINT_BOUNDARY = "joint-boundary"
MULTI_OUTGOING = "multi-outgoing"
OUTPUT_BOUNDARY = "output-boundary"
JOINT = "joint"


@dataclass
class Segment:
    id: str
    members: list[str]
    endpoint: str
    has_params: bool
    is_joint: bool = False


@dataclass
class SegmentGraph:
    segments: dict[str, Segment]
    edges: list[tuple[str, str]]
    inputs: list[str]          # segments fed directly by a graph input
    outputs: list[str]         # segments feeding a graph output
    owner: dict[str, str]      # trace vertex id -> segment id
    visits: int = 0            # vertex + edge visits spent building it

    def __post_init__(self):
        self.succ: dict[str, list[str]] = {k: [] for k in self.segments}
        self.pred: dict[str, list[str]] = {k: [] for k in self.segments}
        for a, b in self.edges:
            self.succ[a].append(b)
            self.pred[b].append(a)


@dataclass
class Group:
    id: str
    segment: str | None
    tensors: list[str]
    # (tensor name, start, stop) in tensor-local flat coordinates; None = whole tensor
    ranges: list[tuple[str, int, int]] | None = None


@dataclass
class GroupPartition:
    groups: list[Group]        # G_s
    complement: Group          # G_s^C

    def __post_init__(self):
        self.by_id = {g.id: g for g in self.groups}

    @property
    def ids(self) -> list[str]:
        return [g.id for g in self.groups]

    def segment_of(self, gid: str) -> str:
        return self.by_id[gid].segment

    def group_of_segment(self, sid: str) -> str | None:
        for g in self.groups:
            if g.segment == sid:
                return g.id
        return None


def build_segment_graph(g: TraceGraph) -> SegmentGraph:
    """Condense ``g`` into segments (breadth-first over segment heads,
    depth-first growth within a segment)."""
    visits = 0
    owner: dict[str, str] = {}
    segments: dict[str, Segment] = {}
    order: list[str] = []
    output_ids = set(g.outputs)

    def is_op(vid):
        return g.vertices[vid].op not in ("Input", "Output")

    heads = sorted({s for i in g.inputs for s in g.successors(i) if is_op(s)})
    queue = deque(heads)
    queued = set(heads)
    while queue:
        head = queue.popleft()
        visits += 1
        if head in owner:
            continue
        members = [head]
        cur = head
        if g.is_joint(head):
            endpoint = JOINT
        else:
            while True:
                succ = g.successors(cur)
                visits += len(succ)
                if len(succ) > 1:
                    endpoint = MULTI_OUTGOING
                    break
                nxt = succ[0]
                if nxt in output_ids:
                    endpoint = OUTPUT_BOUNDARY
                    break
                if g.is_joint(nxt):
                    endpoint = JOINT_BOUNDARY
                    break
                # a non-joint op has a single input, so ``nxt`` is not owned yet
                members.append(nxt)
                visits += 1
                cur = nxt
        sid = members[0]
        for m in members:
            owner[m] = sid
        segments[sid] = Segment(
            sid, members, endpoint,
            has_params=any(g.vertices[m].kind.has_params for m in members),
            is_joint=g.is_joint(head),
        )
        order.append(sid)
        for nxt in sorted(g.successors(members[-1])):
            if is_op(nxt) and nxt not in owner and nxt not in queued:
                queue.append(nxt)
                queued.add(nxt)

    edges = []
    seen = set()
    for e in g.edges:
        visits += 1
        if e.src in owner and e.dst in owner and owner[e.src] != owner[e.dst]:
            pair = (owner[e.src], owner[e.dst])
            if pair not in seen:
                seen.add(pair)
                edges.append(pair)
    inputs = sorted({owner[s] for i in g.inputs for s in g.successors(i) if s in owner})
    outputs = sorted({owner[e.src] for o in g.outputs for e in g.in_edges(o) if e.src in owner})
    segs = {k: segments[k] for k in order}
    return SegmentGraph(segs, edges, inputs, outputs, owner, visits)


def instrumented_visit_count(g: TraceGraph) -> int:
    return build_segment_graph(g).visits


def discover_removal_structures(sg: SegmentGraph, g: TraceGraph) -> GroupPartition:
    """Split trainable tensors into removal-structure groups and the rest."""
    groups = []
    claimed = set()
    output_adjacent = set(sg.outputs)
    for sid, seg in sg.segments.items():
        succ = sg.succ[sid]
        if not seg.has_params or not succ or sid in output_adjacent:
            continue
        if not all(sg.segments[t].is_joint for t in succ):
            continue
        tensors = [s.name for m in seg.members for s in g.vertices[m].params if s.trainable]
        groups.append(Group(sid, sid, tensors))
        claimed.update(tensors)
    rest = [s.name for s in g.param_specs() if s.trainable and s.name not in claimed]
    if not groups:
        log.warning("no removal structures found: nothing to search")
    return GroupPartition(groups, Group("complement", None, rest))


def reachable(sg: SegmentGraph, removed: set[str], counter: list[int] | None = None) -> set[str]:
    """Segments reachable from the surviving input segments."""
    seen = {s for s in sg.inputs if s not in removed}
    queue = deque(seen)
    n = 0
    while queue:
        s = queue.popleft()
        n += 1
        for t in sg.succ[s]:
            n += 1
            if t not in removed and t not in seen:
                seen.add(t)
                queue.append(t)
    if counter is not None:
        counter[0] += n
    return seen


def removal_validity(sg: SegmentGraph, removed, counter: list[int] | None = None) -> bool:
    """True iff, with ``removed`` segments deleted, every output segment is
    reachable from an input and no surviving segment is cut off from the
    inputs (so nothing left in the network consumes a vanished tensor)."""
    removed = set(removed)
    if any(o in removed for o in sg.outputs):
        return False
    seen = reachable(sg, removed, counter)
    return len(seen) == len(sg.segments) - len(removed & set(sg.segments))


def trace_validity_oracle(g: TraceGraph, deleted_vertices) -> bool:
    """Brute-force check on the trace graph itself: delete the vertices and
    require every surviving vertex (outputs included) to be reachable from an
    input."""
    deleted = set(deleted_vertices)
    seen = set(g.inputs)
    stack = list(g.inputs)
    while stack:
        v = stack.pop()
        for s in g.successors(v):
            if s not in deleted and s not in seen:
                seen.add(s)
                stack.append(s)
    return all(v in seen for v in g.vertices if v not in deleted)


def max_feasible_sparsity(sg: SegmentGraph, partition: GroupPartition, limit: int = 20) -> int | None:
    """Largest valid number of removal structures, by exhaustive search.

    Returns ``None`` when there are more than ``limit`` groups.
    """
    segs = [partition.segment_of(gid) for gid in partition.ids]
    if len(segs) > limit:
        return None
    for k in range(len(segs), -1, -1):
        for combo in combinations(segs, k):
            if removal_validity(sg, combo):
                return k
    return 0


def group_indices(partition: GroupPartition, offsets: dict[str, tuple[int, int]]) -> dict[str, np.ndarray]:
    """Flat coordinates in ``x`` for every group of ``G_s``."""
    out = {}
    for grp in partition.groups:
        idx = []
        for t in grp.tensors:
            lo, hi = offsets[t]
            idx.append(np.arange(lo, hi))
        out[grp.id] = np.concatenate(idx) if idx else np.zeros(0, dtype=np.int64)
    return out


def report(sg: SegmentGraph, partition: GroupPartition, g: TraceGraph) -> dict:
    """JSON-ready description of the search space."""
    sizes = {s.name: s.size for s in g.param_specs()}
    return {
        "segments": [{"id": s.id, "members": s.members, "endpoint": s.endpoint,
                      "has_params": s.has_params} for s in sg.segments.values()],
        "segment_edges": [list(e) for e in sg.edges],
        "G_s": [{"group_id": grp.id, "segment_members": sg.segments[grp.segment].members,
                 "param_names": grp.tensors, "dim": sum(sizes[t] for t in grp.tensors)}
                for grp in partition.groups],
        "G_s_complement_dim": sum(sizes[t] for t in partition.complement.tensors),
    }

"""Graphviz DOT output for trace and segment graphs."""

from __future__ import annotations

from typing import Mapping

from .ir import TraceGraph
from .search_space import SegmentGraph

_SHAPES = {"Input": "invhouse", "Output": "house", "Add": "circle", "Concat": "diamond"}


def _q(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n") + '"'


def emit_dot(graph: TraceGraph | SegmentGraph, redundant=(), labels: Mapping[str, str] | None = None,
             name: str = "G") -> str:
    """DOT text; ids in ``redundant`` (vertices or segments) are drawn dashed
    and grey, ``labels`` adds a second label line per id."""
    redundant = set(redundant)
    labels = labels or {}
    lines = [f"digraph {_q(name)} {{", "  rankdir=TB;", "  node [fontname=Helvetica, fontsize=10];"]
    if isinstance(graph, TraceGraph):
        nodes = [(vid, v.op, _SHAPES.get(v.op, "box")) for vid, v in graph.vertices.items()]
        edges = [(e.src, e.dst) for e in graph.edges]
    else:
        nodes = [(sid, " | ".join(s.members), "ellipse" if s.is_joint else "box")
                 for sid, s in graph.segments.items()]
        edges = list(graph.edges)
    for nid, text, shape in nodes:
        label = f"{nid}\n{text}" if text != nid else nid
        if nid in labels:
            label += "\n" + labels[nid]
        style = ', style=dashed, color=grey50, fontcolor=grey50' if nid in redundant else ""
        lines.append(f"  {_q(nid)} [label={_q(label)}, shape={shape}{style}];")
    for a, b in edges:
        style = " [style=dashed, color=grey50]" if a in redundant or b in redundant else ""
        lines.append(f"  {_q(a)} -> {_q(b)}{style};")
    lines.append("}")
    return "\n".join(lines) + "\n"

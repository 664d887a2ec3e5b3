"""Model-description JSON and the binary parameter blob.

Model document::

    {"inputs":  [{"id": "x", "shape": [1, 28, 28]}],
     "outputs": ["out"],
     "nodes":   [{"id": "conv1", "op": "Conv2d", "attrs": {...}, "inputs": ["x"]},
                 ...,
                 {"id": "out", "op": "Output", "inputs": ["linear"]}],
     "params":  {"conv1.weight": {"shape": [...], "data": [...]}}}      # optional

A ``params`` entry may instead carry ``{"shape", "offset"}`` where ``offset``
indexes (in elements) into a flat float array supplied by the caller.

Parameter blob: ``u64 little-endian header length | JSON manifest | body``.
The manifest maps tensor name to ``{dtype, shape, byte_offset, byte_length}``
with offsets relative to the start of the body.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .ir import ATTR_SCHEMA, OP_KINDS, Edge, GraphError, TraceGraph, Vertex

_TOP_KEYS = {"inputs", "outputs", "nodes", "params"}
_NODE_KEYS = {"id", "op", "attrs", "inputs"}
_DTYPES = {"float32": np.float32, "float64": np.float64}


class ModelSpecError(GraphError):
    pass


def parse_model_spec(text: str | Mapping[str, Any], flat: np.ndarray | None = None
                     ) -> tuple[TraceGraph, dict[str, np.ndarray]]:
    """Parse a model document into a validated graph.

    Returns the graph and any parameter values embedded in the document
    (empty when the document carries none; callers then initialise).
    """
    if isinstance(text, (str, bytes)):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ModelSpecError(f"malformed JSON: {exc}") from None
    else:
        doc = dict(text)
    if not isinstance(doc, dict):
        raise ModelSpecError("model document must be a JSON object")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ModelSpecError(f"unknown top-level keys: {sorted(unknown)}")
    for key in ("inputs", "outputs", "nodes"):
        if key not in doc:
            raise ModelSpecError(f"missing top-level key {key!r}")

    vertices: list[Vertex] = []
    edges: list[Edge] = []
    inputs: list[str] = []
    for item in doc["inputs"]:
        if not isinstance(item, dict) or set(item) != {"id", "shape"}:
            raise ModelSpecError(f"input entry must be {{id, shape}}: {item!r}")
        shape = item["shape"]
        if not (isinstance(shape, list) and shape and all(isinstance(d, int) and d > 0 for d in shape)):
            raise ModelSpecError(f"input {item['id']!r}: bad shape {shape!r}")
        vertices.append(Vertex(item["id"], "Input", {"shape": list(shape)}))
        inputs.append(item["id"])

    for node in doc["nodes"]:
        if not isinstance(node, dict):
            raise ModelSpecError(f"node entry must be an object: {node!r}")
        nid = node.get("id")
        unknown = set(node) - _NODE_KEYS
        if unknown:
            raise ModelSpecError(f"node {nid!r}: unknown keys {sorted(unknown)}")
        if not isinstance(nid, str) or not nid:
            raise ModelSpecError(f"node without a string id: {node!r}")
        op = node.get("op")
        if op not in OP_KINDS or op == "Input":
            raise ModelSpecError(f"node {nid!r}: unknown op kind {op!r}")
        attrs = _check_attrs(nid, op, node.get("attrs", {}))
        vertices.append(Vertex(nid, op, attrs))
        srcs = node.get("inputs", [])
        if not isinstance(srcs, list):
            raise ModelSpecError(f"node {nid!r}: inputs must be a list")
        edges.extend(Edge(src, nid, slot) for slot, src in enumerate(srcs))

    outputs = list(doc["outputs"])
    declared = {v.id for v in vertices}
    seen = set()
    for v in vertices:
        if v.id in seen:
            raise ModelSpecError(f"duplicate vertex id {v.id!r}")
        seen.add(v.id)
    for e in edges:
        if e.src not in declared:
            raise ModelSpecError(f"node {e.dst!r} references undeclared id {e.src!r}")
    for o in outputs:
        if o not in declared:
            raise ModelSpecError(f"output references undeclared id {o!r}")

    try:
        g = TraceGraph(vertices, edges, inputs, outputs)
    except ModelSpecError:
        raise
    except GraphError as exc:
        raise ModelSpecError(str(exc)) from None

    values = _embedded_params(g, doc.get("params"), flat)
    return g, values


def _check_attrs(nid: str, op: str, attrs: Any) -> dict[str, Any]:
    if not isinstance(attrs, dict):
        raise ModelSpecError(f"node {nid!r}: attrs must be an object")
    required, optional = ATTR_SCHEMA[op]
    unknown = set(attrs) - set(required) - set(optional)
    if unknown:
        raise ModelSpecError(f"node {nid!r} ({op}): unknown attrs {sorted(unknown)}")
    missing = [k for k in required if k not in attrs]
    if missing:
        raise ModelSpecError(f"node {nid!r} ({op}): missing attrs {missing}")
    out = dict(optional)
    out.update(attrs)
    for k in ("in_channels", "out_channels", "kernel", "stride", "in_features",
              "out_features", "num_features"):
        if k in out and not (isinstance(out[k], int) and out[k] > 0):
            raise ModelSpecError(f"node {nid!r}: attr {k} must be a positive integer")
    if "padding" in out and not (isinstance(out["padding"], int) and out["padding"] >= 0):
        raise ModelSpecError(f"node {nid!r}: padding must be a non-negative integer")
    if op == "Concat" and out["axis"] != 1:
        raise ModelSpecError(f"node {nid!r}: only channel concatenation (axis=1) is supported")
    return out


def _embedded_params(g: TraceGraph, params: Any, flat: np.ndarray | None) -> dict[str, np.ndarray]:
    if not params:
        return {}
    specs = {s.name: s for v in g.vertices.values() for s in v.params}
    out = {}
    for name, entry in params.items():
        if name not in specs:
            raise ModelSpecError(f"params: unknown tensor {name!r}")
        shape = tuple(entry.get("shape", ()))
        if shape != specs[name].shape:
            raise ModelSpecError(f"params: {name!r} has shape {shape}, expected {specs[name].shape}")
        n = specs[name].size
        if "data" in entry:
            data = np.asarray(entry["data"], dtype=np.float64).reshape(-1)
        elif "offset" in entry:
            if flat is None:
                raise ModelSpecError(f"params: {name!r} references a blob offset but no blob given")
            data = np.asarray(flat[entry["offset"]:entry["offset"] + n], dtype=np.float64)
        else:
            raise ModelSpecError(f"params: {name!r} needs 'data' or 'offset'")
        if data.size != n:
            raise ModelSpecError(f"params: {name!r} has {data.size} values, expected {n}")
        out[name] = data.reshape(shape)
    return out


def to_document(g: TraceGraph, params: Mapping[str, np.ndarray] | None = None) -> dict[str, Any]:
    """Inverse of :func:`parse_model_spec` (parameters inlined when given)."""
    doc: dict[str, Any] = {
        "inputs": [{"id": i, "shape": list(g.vertices[i].attrs["shape"])} for i in g.inputs],
        "outputs": list(g.outputs),
        "nodes": [],
    }
    for vid, v in g.vertices.items():
        if v.op == "Input":
            continue
        attrs = dict(v.attrs)
        node: dict[str, Any] = {"id": vid, "op": v.op}
        if attrs:
            node["attrs"] = attrs
        node["inputs"] = g.predecessors(vid)
        doc["nodes"].append(node)
    if params:
        doc["params"] = {k: {"shape": list(np.shape(a)), "data": np.asarray(a).reshape(-1).tolist()}
                         for k, a in params.items()}
    return doc


def serialize_model(g: TraceGraph, params: Mapping[str, np.ndarray] | None = None) -> str:
    return json.dumps(to_document(g, params), indent=1)


def model_hash(text: str | bytes) -> str:
    if isinstance(text, str):
        text = text.encode()
    return hashlib.sha256(text).hexdigest()


# -- parameter blob ---------------------------------------------------------

def encode_blob(tensors: Mapping[str, np.ndarray]) -> bytes:
    manifest = {}
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.name
        if dt not in _DTYPES:
            arr = arr.astype(np.float64)
            dt = "float64"
        raw = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        manifest[name] = {"dtype": dt, "shape": list(arr.shape),
                          "byte_offset": offset, "byte_length": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(manifest).encode()
    return struct.pack("<Q", len(header)) + header + b"".join(chunks)


def decode_blob(data: bytes) -> dict[str, np.ndarray]:
    if len(data) < 8:
        raise ValueError("parameter blob truncated: missing header length")
    (hlen,) = struct.unpack("<Q", data[:8])
    if len(data) < 8 + hlen:
        raise ValueError("parameter blob truncated: incomplete header")
    manifest = json.loads(data[8:8 + hlen])
    body = memoryview(data)[8 + hlen:]
    out = {}
    for name, m in manifest.items():
        start, length = m["byte_offset"], m["byte_length"]
        if start + length > len(body):
            raise ValueError(f"parameter blob truncated inside tensor {name!r}")
        dt = np.dtype(_DTYPES[m["dtype"]]).newbyteorder("<")
        arr = np.frombuffer(body[start:start + length], dtype=dt)
        out[name] = arr.astype(dt.newbyteorder("="), copy=True).reshape(m["shape"])
    return out


def atomic_write(path: str | os.PathLike, data: bytes | str) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_blob(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    atomic_write(path, encode_blob(tensors))


def read_blob(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return decode_blob(Path(path).read_bytes())

"""Dense tensor execution and reverse-mode gradients for a :class:`TraceGraph`.

All trainable tensors of a graph live as views into one flat vector
``ParamStore.x``; gradients mirror that layout in ``GradStore.flat``.  The
optimizer works on the flat vectors, the kernels on the views.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import numpy as np

from . import kernels
from .ir import ParamSpec, TraceGraph, Vertex, topo_order


class ParamStore:
    """Trainable tensors (views into ``x``) plus non-trainable buffers.

    Ordering is topological, then per-vertex role order, so coordinates into
    ``x`` are stable for a given graph.
    """

    def __init__(self, specs: list[ParamSpec], dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.specs = [s for s in specs if s.trainable]
        self.buffer_specs = [s for s in specs if not s.trainable]
        self.offsets: dict[str, tuple[int, int]] = {}
        pos = 0
        for s in self.specs:
            self.offsets[s.name] = (pos, pos + s.size)
            pos += s.size
        self.x = np.zeros(pos, dtype=self.dtype)
        self.tensors = {s.name: self.x[slice(*self.offsets[s.name])].reshape(s.shape) for s in self.specs}
        self.buffers = {s.name: np.zeros(s.shape, dtype=self.dtype) for s in self.buffer_specs}

    @classmethod
    def for_graph(cls, g: TraceGraph, dtype=np.float64) -> "ParamStore":
        return cls(g.param_specs(), dtype)

    @property
    def total_dim(self) -> int:
        return self.x.size

    def __getitem__(self, name: str) -> np.ndarray:
        if name in self.tensors:
            return self.tensors[name]
        return self.buffers[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors or name in self.buffers

    def names(self) -> list[str]:
        return [s.name for s in self.specs]

    def state(self) -> dict[str, np.ndarray]:
        """Copies of every tensor and buffer, trainable first."""
        out = {k: v.copy() for k, v in self.tensors.items()}
        out.update({k: v.copy() for k, v in self.buffers.items()})
        return out

    def load(self, values: Mapping[str, np.ndarray], strict: bool = True) -> None:
        for name in list(self.tensors) + list(self.buffers):
            if name in values:
                self[name][...] = np.asarray(values[name]).reshape(self[name].shape)
            elif strict:
                raise KeyError(f"missing tensor {name!r}")

    def copy(self, dtype=None) -> "ParamStore":
        other = ParamStore(self.specs + self.buffer_specs, dtype or self.dtype)
        other.x[...] = self.x
        for k, v in self.buffers.items():
            other.buffers[k][...] = v
        return other


class GradStore:
    def __init__(self, store: ParamStore):
        self.offsets = store.offsets
        self.flat = np.zeros_like(store.x)
        self.tensors = {s.name: self.flat[slice(*store.offsets[s.name])].reshape(s.shape)
                        for s in store.specs}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        # supports ``grads[name] += ...`` while keeping the view into ``flat``
        t = self.tensors[name]
        if value is not t:
            t[...] = value


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if len(self.inputs) < 1:
            raise ValueError("batch must hold at least one sample")
        if len(self.labels) != len(self.inputs):
            raise ValueError("inputs and labels disagree on batch size")


@dataclass
class Tape:
    graph: TraceGraph
    store: ParamStore
    mode: str
    order: list[str]
    caches: dict[str, Any]
    in_shapes: dict[str, list[tuple[int, ...]]]
    dlogits: np.ndarray
    consumed: bool = False


# -- per-op kernels ---------------------------------------------------------
# forward(v, xs, store, train, update) -> (out, cache)
# backward(v, dout, cache, store, grads, need_dx) -> [dx per input] (None allowed)

def _conv_fwd(v, xs, store, train, update):
    a = v.attrs
    x = xs[0]
    k, s, p = a["kernel"], a["stride"], a["padding"]
    w = store[v.id + ".weight"]
    o = w.shape[0]
    cols = kernels.im2col(np.ascontiguousarray(x), k, s, p)
    n = x.shape[0]
    oh, ow = kernels.out_size(x.shape[2], k, s, p), kernels.out_size(x.shape[3], k, s, p)
    out = w.reshape(o, -1) @ cols
    if a.get("bias", True):
        out += store[v.id + ".bias"][:, None]
    out = np.ascontiguousarray(out.reshape(o, n, oh, ow).transpose(1, 0, 2, 3))
    return out, (cols if train else None, x.shape)


def _conv_bwd(v, dout, cache, store, grads, need_dx):
    a = v.attrs
    cols, xshape = cache
    w = store[v.id + ".weight"]
    o = w.shape[0]
    d = np.ascontiguousarray(dout.transpose(1, 0, 2, 3)).reshape(o, -1)
    grads[v.id + ".weight"] += (d @ cols.T).reshape(w.shape)
    if a.get("bias", True):
        grads[v.id + ".bias"] += d.sum(axis=1)
    if not need_dx:
        return [None]
    dcols = w.reshape(o, -1).T @ d
    return [kernels.col2im(dcols, xshape, a["kernel"], a["stride"], a["padding"])]


def _linear_fwd(v, xs, store, train, update):
    x = xs[0]
    out = x @ store[v.id + ".weight"].T
    if v.attrs.get("bias", True):
        out = out + store[v.id + ".bias"]
    return out, x


def _linear_bwd(v, dout, x, store, grads, need_dx):
    grads[v.id + ".weight"] += dout.T @ x
    if v.attrs.get("bias", True):
        grads[v.id + ".bias"] += dout.sum(axis=0)
    return [dout @ store[v.id + ".weight"] if need_dx else None]


def _bn_shape(x):
    if x.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    return (0,), (1, -1)


def _bn_fwd(v, xs, store, train, update):
    a = v.attrs
    x = xs[0]
    axes, bshape = _bn_shape(x)
    gamma = store[v.id + ".weight"].reshape(bshape)
    beta = store[v.id + ".bias"].reshape(bshape)
    eps = a.get("eps", 1e-5)
    if train:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        if update:
            m = a.get("momentum", 0.1)
            count = x.size // x.shape[1]
            rm, rv = store[v.id + ".running_mean"], store[v.id + ".running_var"]
            rm *= 1 - m
            rm += m * mean
            rv *= 1 - m
            rv += m * var * (count / max(count - 1, 1))
    else:
        mean = store[v.id + ".running_mean"]
        var = store[v.id + ".running_var"]
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(bshape)) * inv.reshape(bshape)
    out = gamma * xhat + beta
    mask = None
    if a.get("relu", False):
        mask = out > 0
        out = out * mask
    return out, (xhat, inv, mask, train)


def _bn_bwd(v, dout, cache, store, grads, need_dx):
    xhat, inv, mask, train = cache
    axes, bshape = _bn_shape(xhat)
    if mask is not None:
        dout = dout * mask
    grads[v.id + ".weight"] += (dout * xhat).sum(axis=axes)
    grads[v.id + ".bias"] += dout.sum(axis=axes)
    if not need_dx:
        return [None]
    gamma = store[v.id + ".weight"].reshape(bshape)
    if not train:
        return [dout * gamma * inv.reshape(bshape)]
    m = xhat.size // xhat.shape[1]
    dxhat = dout * gamma
    dx = (inv.reshape(bshape) / m) * (
        m * dxhat
        - dxhat.sum(axis=axes).reshape(bshape)
        - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
    )
    return [dx]


def _relu_fwd(v, xs, store, train, update):
    mask = xs[0] > 0
    return xs[0] * mask, mask


def _relu_bwd(v, dout, mask, store, grads, need_dx):
    return [dout * mask]


def _maxpool_fwd(v, xs, store, train, update):
    a = v.attrs
    out, arg = kernels.maxpool_forward(np.ascontiguousarray(xs[0]), a["kernel"], a["stride"], a["padding"])
    return out, (arg, xs[0].shape)


def _maxpool_bwd(v, dout, cache, store, grads, need_dx):
    a = v.attrs
    arg, shape = cache
    return [kernels.maxpool_backward(dout, arg, shape, a["kernel"], a["stride"], a["padding"])]


def _avgpool_fwd(v, xs, store, train, update):
    a = v.attrs
    out = kernels.avgpool_forward(np.ascontiguousarray(xs[0]), a["kernel"], a["stride"], a["padding"])
    return out, xs[0].shape


def _avgpool_bwd(v, dout, shape, store, grads, need_dx):
    a = v.attrs
    return [kernels.avgpool_backward(dout, shape, a["kernel"], a["stride"], a["padding"])]


def _gap_fwd(v, xs, store, train, update):
    return xs[0].mean(axis=(2, 3)), xs[0].shape


def _gap_bwd(v, dout, shape, store, grads, need_dx):
    n, c, h, w = shape
    return [np.broadcast_to((dout / (h * w))[:, :, None, None], shape).copy()]


def _flatten_fwd(v, xs, store, train, update):
    return xs[0].reshape(xs[0].shape[0], -1), xs[0].shape


def _flatten_bwd(v, dout, shape, store, grads, need_dx):
    return [dout.reshape(shape)]


def _add_fwd(v, xs, store, train, update):
    out = xs[0].copy()
    for x in xs[1:]:
        out += x
    return out, len(xs)


def _add_bwd(v, dout, n, store, grads, need_dx):
    return [dout] * n


def _concat_fwd(v, xs, store, train, update):
    return np.concatenate(xs, axis=1), [x.shape[1] for x in xs]


def _concat_bwd(v, dout, widths, store, grads, need_dx):
    return np.split(dout, np.cumsum(widths)[:-1], axis=1)


def _identity_fwd(v, xs, store, train, update):
    return xs[0], None


def _identity_bwd(v, dout, cache, store, grads, need_dx):
    return [dout]


FORWARD: dict[str, Callable] = {
    "Conv2d": _conv_fwd,
    "Linear": _linear_fwd,
    "BatchNorm": _bn_fwd,
    "ReLU": _relu_fwd,
    "MaxPool": _maxpool_fwd,
    "AvgPool": _avgpool_fwd,
    "GlobalAvgPool": _gap_fwd,
    "Flatten": _flatten_fwd,
    "Add": _add_fwd,
    "Concat": _concat_fwd,
    "Output": _identity_fwd,
}
BACKWARD: dict[str, Callable] = {
    "Conv2d": _conv_bwd,
    "Linear": _linear_bwd,
    "BatchNorm": _bn_bwd,
    "ReLU": _relu_bwd,
    "MaxPool": _maxpool_bwd,
    "AvgPool": _avgpool_bwd,
    "GlobalAvgPool": _gap_bwd,
    "Flatten": _flatten_bwd,
    "Add": _add_bwd,
    "Concat": _concat_bwd,
    "Output": _identity_bwd,
}


# -- forward / backward -----------------------------------------------------

def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean loss and its gradient with respect to the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    s = ez.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    loss = float(np.mean(np.log(s[:, 0]) - z[np.arange(n), labels]))
    d = ez / s
    d[np.arange(n), labels] -= 1
    return loss, d / n


def run_graph(g: TraceGraph, store: ParamStore, inputs: np.ndarray, train: bool = False,
              update_running: bool = False, order: list[str] | None = None
              ) -> tuple[dict[str, np.ndarray], dict[str, Any], dict[str, list]]:
    order = order or topo_order(g)
    acts: dict[str, np.ndarray] = {}
    caches: dict[str, Any] = {}
    in_shapes: dict[str, list] = {}
    x = np.asarray(inputs, dtype=store.dtype)
    for vid in order:
        v = g.vertices[vid]
        if v.op == "Input":
            acts[vid] = x
            continue
        xs = [acts[s] for s in g.predecessors(vid)]
        in_shapes[vid] = [t.shape for t in xs]
        acts[vid], caches[vid] = FORWARD[v.op](v, xs, store, train, update_running)
    return acts, caches, in_shapes


def _first_nonfinite(g: TraceGraph, order: list[str], acts: dict[str, np.ndarray]) -> str | None:
    for vid in order:
        if not np.all(np.isfinite(acts[vid])):
            return vid
    return None


def forward(g: TraceGraph, store: ParamStore, batch: Batch, mode: str = "train",
            update_running: bool = True) -> tuple[float, np.ndarray, Tape]:
    """Loss, logits and an activation tape for :func:`backward`.

    In ``train`` mode BatchNorm normalises with batch statistics (and updates
    the running statistics unless ``update_running`` is false); in ``eval``
    mode it uses the running statistics.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', not {mode!r}")
    if len(g.outputs) != 1:
        raise ValueError("loss needs a graph with exactly one output")
    order = topo_order(g)
    acts, caches, in_shapes = run_graph(g, store, batch.inputs, mode == "train",
                                        mode == "train" and update_running, order)
    logits = acts[g.outputs[0]]
    loss, dlogits = softmax_cross_entropy(logits, np.asarray(batch.labels))
    if not np.isfinite(loss):
        bad = _first_nonfinite(g, order, acts)
        raise FloatingPointError(f"non-finite activation at vertex {bad!r}" if bad
                                 else "non-finite loss")
    return loss, logits, Tape(g, store, mode, order, caches, in_shapes, dlogits)


def backward(tape: Tape, scale: float = 1.0) -> GradStore:
    """Gradient of ``scale * loss`` with respect to every trainable tensor."""
    if tape.consumed:
        raise RuntimeError("tape already consumed")
    if tape.mode != "train":
        raise RuntimeError("backward needs a tape recorded in train mode")
    tape.consumed = True
    g, store = tape.graph, tape.store
    grads = GradStore(store)
    upstream: dict[str, np.ndarray] = {g.outputs[0]: tape.dlogits * scale}
    # vertices whose inputs all come straight from Input need no input gradient
    for vid in reversed(tape.order):
        v = g.vertices[vid]
        if v.op == "Input" or vid not in upstream:
            continue
        dout = upstream.pop(vid)
        preds = g.predecessors(vid)
        need_dx = any(g.vertices[p].op != "Input" for p in preds)
        dxs = BACKWARD[v.op](v, dout, tape.caches.pop(vid), store, grads, need_dx)
        for p, dx in zip(preds, dxs):
            if dx is None or g.vertices[p].op == "Input":
                continue
            if p in upstream:
                upstream[p] = upstream[p] + dx
            else:
                upstream[p] = dx
    return grads


def loss_and_grad(g: TraceGraph, store: ParamStore, batch: Batch,
                  update_running: bool = True) -> tuple[float, np.ndarray, GradStore]:
    loss, logits, tape = forward(g, store, batch, "train", update_running)
    return loss, logits, backward(tape)


def predict(g: TraceGraph, store: ParamStore, inputs: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode logits, computed in chunks."""
    outs = []
    order = topo_order(g)
    for i in range(0, len(inputs), batch_size):
        acts, _, _ = run_graph(g, store, inputs[i:i + batch_size], False, False, order)
        outs.append(acts[g.outputs[0]])
    return np.concatenate(outs, axis=0)


# -- initialisation ---------------------------------------------------------

def fan_in(spec: ParamSpec) -> int:
    n = 1
    for d in spec.shape[1:]:
        n *= d
    return n


def init_params(g: TraceGraph, seed: int = 0, dtype=np.float64) -> ParamStore:
    """Kaiming-uniform weights (bound ``sqrt(6 / fan_in)``), zero biases,
    BatchNorm scale 1 / shift 0, running statistics (0, 1)."""
    store = ParamStore.for_graph(g, dtype)
    rng = np.random.default_rng(seed)
    vertex_op = {s.name: v.op for v in g.vertices.values() for s in v.params}
    for s in store.specs:
        t = store.tensors[s.name]
        if vertex_op[s.name] == "BatchNorm":
            t[...] = 1.0 if s.role == "weight" else 0.0
        elif s.role == "weight":
            bound = np.sqrt(6.0 / fan_in(s))
            t[...] = rng.uniform(-bound, bound, size=s.shape)
        else:
            t[...] = 0.0
    for s in store.buffer_specs:
        store.buffers[s.name][...] = 1.0 if s.role == "running_var" else 0.0
    return store


def make_store(g: TraceGraph, values: Mapping[str, np.ndarray] | None = None,
               seed: int = 0, dtype=np.float64) -> ParamStore:
    """Initialise, then overwrite with any provided tensor values."""
    store = init_params(g, seed, dtype)
    if values:
        store.load(values, strict=False)
    return store


# -- finite differences -----------------------------------------------------

@dataclass
class FDReport:
    max_rel_error: dict[str, float]
    tolerance: float
    failed: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failed


def finite_diff_check(g: TraceGraph, store: ParamStore, batch: Batch, tolerance: float = 1e-4,
                      h: float = 1e-5, max_coords: int | None = None, seed: int = 0,
                      floor: float = 1e-6) -> FDReport:
    """Compare analytic gradients with central differences, per tensor.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``.  Train-mode forward
    without running-statistics updates, so the loss is a pure function of x.
    """
    if store.dtype != np.float64:
        raise ValueError("finite-difference checks need a float64 store")
    if len(batch.inputs) == 0:
        raise ValueError("empty batch")
    _, _, analytic = loss_and_grad(g, store, batch, update_running=False)
    rng = np.random.default_rng(seed)
    errors = {}
    for name in store.names():
        lo, hi = store.offsets[name]
        idx = np.arange(lo, hi)
        if max_coords is not None and idx.size > max_coords:
            idx = np.sort(rng.choice(idx, size=max_coords, replace=False))
        worst = 0.0
        for i in idx:
            orig = store.x[i]
            store.x[i] = orig + h
            fp = forward(g, store, batch, "train", update_running=False)[0]
            store.x[i] = orig - h
            fm = forward(g, store, batch, "train", update_running=False)[0]
            store.x[i] = orig
            num = (fp - fm) / (2 * h)
            a = analytic.flat[i]
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
        errors[name] = worst
    return FDReport(errors, tolerance, [k for k, e in errors.items() if e > tolerance])

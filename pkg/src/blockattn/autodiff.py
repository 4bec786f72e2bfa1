"""Dense-tensor graph engine with eager forward evaluation and taped reverse-mode autodiff.

Tensors are plain ``numpy.ndarray`` buffers.  A :class:`Graph` records every
operation as it is applied (construction order doubles as topological order),
so ``backward`` is a single reverse sweep over the tape.  All structural ops
(transpose, reshape-when-possible, slice, expand) return numpy *views*; the
allocation meter therefore counts real buffers, not aliases.

Determinism: forward values and gradients are pure functions of the input
buffers — re-running an identical construction yields bit-identical results.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class GraphError(Exception):
    """Malformed graph usage (unknown op, bad dtype, non-scalar loss...)."""


class ShapeError(GraphError):
    """Operand shapes incompatible with an op's shape rule."""

    def __init__(self, op: str, detail: str, *shapes):
        self.op = op
        self.shapes = shapes
        joined = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: {detail} (got {joined})" if shapes else f"{op}: {detail}")


class AllocationError(GraphError):
    """Buffer allocation failed; carries the op and requested element count."""

    def __init__(self, op: str, elems: int):
        self.op = op
        self.elems = elems
        super().__init__(f"{op}: failed to allocate {elems} tensor elements")


def _root(arr: np.ndarray) -> np.ndarray:
    while arr.base is not None:
        arr = arr.base
    return arr


class AllocationMeter:
    """Process-global live-element counter for tensor buffers.

    ``current`` is the number of tensor elements alive right now, ``peak`` the
    high-water mark since the last ``reset_peak``.  Graphs register every fresh
    buffer they create and unregister on release, so views never double count.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self.current = 0
        self.peak = 0

    def add(self, elems: int) -> None:
        with self._lock:
            self.current += elems
            if self.current > self.peak:
                self.peak = self.current

    def sub(self, elems: int) -> None:
        with self._lock:
            self.current -= elems

    def reset_peak(self) -> None:
        with self._lock:
            self.peak = self.current


METER = AllocationMeter()


# ---------------------------------------------------------------------------
# op registry
# ---------------------------------------------------------------------------

# forward(attrs, *inputs) -> ndarray
# backward(attrs, out_value, out_grad, *inputs) -> tuple of (ndarray | None)
_FORWARD: dict[str, Callable] = {}
_BACKWARD: dict[str, Callable] = {}


def register_op(kind: str, forward: Callable, backward: Callable) -> None:
    if kind in _FORWARD:
        raise GraphError(f"op kind already registered: {kind}")
    _FORWARD[kind] = forward
    _BACKWARD[kind] = backward


def registered_ops() -> tuple[str, ...]:
    return tuple(_FORWARD)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of leading-axis broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    kept = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if kept:
        grad = grad.sum(axis=kept, keepdims=True)
    return grad


def _trailing_match(big: tuple[int, ...], small: tuple[int, ...]) -> bool:
    return len(small) <= len(big) and big[len(big) - len(small):] == small


# -- matmul -----------------------------------------------------------------

def _matmul_fw(attrs, a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", "operands must have ndim >= 2", a.shape, b.shape)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", "inner dimensions differ", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", "leading dimensions not broadcastable", a.shape, b.shape) from None
    return np.matmul(a, b)


def _matmul_bw(attrs, out, g, a, b):
    ga = _unbroadcast(np.matmul(g, b.swapaxes(-1, -2)), a.shape)
    gb = _unbroadcast(np.matmul(a.swapaxes(-1, -2), g), b.shape)
    return ga, gb


register_op("matmul", _matmul_fw, _matmul_bw)


# -- add / mul (same shape, or one operand matching the other's trailing axes)

def _binary_shapes(op, a, b):
    if a.shape == b.shape:
        return None  # same shape
    if _trailing_match(a.shape, b.shape):
        return "b_small"
    if _trailing_match(b.shape, a.shape):
        return "a_small"
    raise ShapeError(op, "shapes must match exactly or on trailing axes", a.shape, b.shape)


def _add_fw(attrs, a, b):
    _binary_shapes("add", a, b)
    return a + b


def _add_bw(attrs, out, g, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


register_op("add", _add_fw, _add_bw)


def _mul_fw(attrs, a, b):
    _binary_shapes("mul", a, b)
    return a * b


def _mul_bw(attrs, out, g, a, b):
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


register_op("mul", _mul_fw, _mul_bw)


# -- concat / slice ----------------------------------------------------------

def _concat_fw(attrs, *parts):
    axis = attrs["axis"]
    ndim = parts[0].ndim
    axis = axis % ndim
    for p in parts[1:]:
        if p.ndim != ndim:
            raise ShapeError("concat", "rank mismatch", *(q.shape for q in parts))
        if p.shape[:axis] + p.shape[axis + 1:] != parts[0].shape[:axis] + parts[0].shape[axis + 1:]:
            raise ShapeError("concat", f"shapes differ off axis {axis}", *(q.shape for q in parts))
    return np.concatenate(parts, axis=axis)


def _concat_bw(attrs, out, g, *parts):
    axis = attrs["axis"] % parts[0].ndim
    grads = []
    start = 0
    index: list = [slice(None)] * g.ndim
    for p in parts:
        index[axis] = slice(start, start + p.shape[axis])
        grads.append(g[tuple(index)])
        start += p.shape[axis]
    return tuple(grads)


register_op("concat", _concat_fw, _concat_bw)


def _slice_fw(attrs, x):
    axis = attrs["axis"] % x.ndim
    start, size = attrs["start"], attrs["size"]
    if not (0 <= start and start + size <= x.shape[axis]):
        raise ShapeError("slice", f"range [{start}, {start + size}) outside axis {axis}", x.shape)
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, start + size)
    return x[tuple(index)]


def _slice_bw(attrs, out, g, x):
    axis = attrs["axis"] % x.ndim
    gx = np.zeros_like(x)
    index = [slice(None)] * x.ndim
    index[axis] = slice(attrs["start"], attrs["start"] + attrs["size"])
    gx[tuple(index)] = g
    return (gx,)


register_op("slice", _slice_fw, _slice_bw)


# -- elementwise -------------------------------------------------------------

register_op("tanh", lambda attrs, x: np.tanh(x),
            lambda attrs, y, g, x: (g * (1.0 - y * y),))


def _sigmoid_fw(attrs, x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


register_op("sigmoid", _sigmoid_fw,
            lambda attrs, y, g, x: (g * y * (1.0 - y),))

register_op("relu", lambda attrs, x: np.maximum(x, 0.0),
            lambda attrs, y, g, x: (g * (x > 0),))


def _elu_fw(attrs, x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


register_op("elu", _elu_fw,
            lambda attrs, y, g, x: (g * np.where(x > 0, 1.0, y + 1.0),))

register_op("exp", lambda attrs, x: np.exp(x),
            lambda attrs, y, g, x: (g * y,))


def _log_fw(attrs, x):
    if np.any(x <= 0):
        raise GraphError("log: input has non-positive entries")
    return np.log(x)


register_op("log", _log_fw,
            lambda attrs, y, g, x: (g / x,))

register_op("abs", lambda attrs, x: np.abs(x),
            lambda attrs, y, g, x: (g * np.sign(x),))


# -- softmax over the last axis ----------------------------------------------

def _softmax_fw(attrs, x):
    # Rows whose entries are all -inf (fully masked) yield all-zero rows
    # instead of NaN; the denominator is guarded the same way.
    m = np.max(x, axis=-1, keepdims=True)
    alive = np.isfinite(m)
    e = np.exp(x - np.where(alive, m, 0.0))
    denom = e.sum(axis=-1, keepdims=True)
    return np.where(alive, e / np.where(denom == 0.0, 1.0, denom), 0.0)


def _softmax_bw(attrs, y, g, x):
    t = g * y
    return (t - y * t.sum(axis=-1, keepdims=True),)


register_op("softmax", _softmax_fw, _softmax_bw)


# -- reductions ---------------------------------------------------------------

def _sum_fw(attrs, x):
    return np.sum(x, axis=attrs["axis"])


def _sum_bw(attrs, y, g, x):
    axis = attrs["axis"]
    if axis is None:
        return (np.broadcast_to(g, x.shape),)
    return (np.broadcast_to(np.expand_dims(g, axis), x.shape),)


register_op("sum", _sum_fw, _sum_bw)


def _max_fw(attrs, x):
    return np.max(x, axis=attrs["axis"])


def _max_bw(attrs, y, g, x):
    axis = attrs["axis"]
    gx = np.zeros_like(x)
    if axis is None:
        gx.reshape(-1)[np.argmax(x)] = g
        return (gx,)
    idx = np.expand_dims(np.argmax(x, axis=axis), axis)
    np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
    return (gx,)


register_op("max", _max_fw, _max_bw)


# -- scalar affine ------------------------------------------------------------

register_op("scalar-mul", lambda attrs, x: x * x.dtype.type(attrs["alpha"]),
            lambda attrs, y, g, x: (g * x.dtype.type(attrs["alpha"]),))

register_op("scalar-add", lambda attrs, x: x + x.dtype.type(attrs["beta"]),
            lambda attrs, y, g, x: (g,))


# -- structure ----------------------------------------------------------------

def _transpose_fw(attrs, x):
    perm = attrs["perm"]
    if sorted(perm) != list(range(x.ndim)):
        raise ShapeError("transpose", f"perm {perm} is not a permutation", x.shape)
    return np.transpose(x, perm)


def _transpose_bw(attrs, y, g, x):
    inv = np.argsort(attrs["perm"])
    return (np.transpose(g, inv),)


register_op("transpose", _transpose_fw, _transpose_bw)


def _reshape_fw(attrs, x):
    return np.reshape(x, attrs["shape"])


register_op("reshape", _reshape_fw,
            lambda attrs, y, g, x: (np.reshape(g, x.shape),))


def _expand_fw(attrs, x):
    axis, size = attrs["axis"], attrs["size"]
    expanded = np.expand_dims(x, axis)
    target = list(expanded.shape)
    target[axis % expanded.ndim] = size
    return np.broadcast_to(expanded, target)


def _expand_bw(attrs, y, g, x):
    return (g.sum(axis=attrs["axis"] % (x.ndim + 1)),)


register_op("expand", _expand_fw, _expand_bw)


# -- embedding lookup ----------------------------------------------------------

def _embedding_fw(attrs, table):
    ids = attrs["ids"]
    if table.ndim != 2:
        raise ShapeError("embedding-lookup", "table must be 2-D", table.shape)
    if np.any(ids < 0) or np.any(ids >= table.shape[1]):
        raise GraphError(
            f"embedding-lookup: id out of range [0, {table.shape[1]})")
    return table[:, ids]


def _embedding_bw(attrs, y, g, table):
    gt = np.zeros_like(table)
    ids = attrs["ids"].reshape(-1)
    np.add.at(gt, (slice(None), ids), g.reshape(table.shape[0], -1))
    return (gt,)


register_op("embedding-lookup", _embedding_fw, _embedding_bw)


# -- fused affine: act(W @ x + b[:, None]) ------------------------------------

def _affine_fw(attrs, w, x, b):
    act = attrs.get("act", "none")
    if w.ndim != 2 or b.ndim != 1 or x.ndim < 2:
        raise ShapeError("affine", "need W (o,i), x (...,i,n), b (o,)", w.shape, x.shape, b.shape)
    if x.shape[-2] != w.shape[1] or b.shape[0] != w.shape[0]:
        raise ShapeError("affine", "dimensions disagree", w.shape, x.shape, b.shape)
    z = np.matmul(w, x) + b[:, None]
    if act == "none":
        return z
    if act == "relu":
        return np.maximum(z, 0.0)
    if act == "sigmoid":
        return _sigmoid_fw(None, z)
    if act == "tanh":
        return np.tanh(z)
    raise GraphError(f"affine: unknown activation {act!r}")


def _affine_bw(attrs, y, g, w, x, b):
    act = attrs.get("act", "none")
    if act == "relu":
        gz = g * (y > 0)
    elif act == "sigmoid":
        gz = g * y * (1.0 - y)
    elif act == "tanh":
        gz = g * (1.0 - y * y)
    else:
        gz = g
    gw = _unbroadcast(np.matmul(gz, x.swapaxes(-1, -2)), w.shape)
    gx = np.matmul(w.T, gz)
    gb = gz.sum(axis=tuple(i for i in range(gz.ndim) if i != gz.ndim - 2))
    return gw, gx, gb


register_op("affine", _affine_fw, _affine_bw)


# -- fused pooling contraction: sum_j p[..., j] * x[..., j] --------------------

def _weighted_sum_fw(attrs, p, x):
    if p.shape != x.shape:
        raise ShapeError("weighted-sum", "operands must share one shape",
                         p.shape, x.shape)
    return np.einsum("...i,...i->...", p, x)


def _weighted_sum_bw(attrs, y, g, p, x):
    ge = np.expand_dims(g, -1)
    return ge * x, ge * p


register_op("weighted-sum", _weighted_sum_fw, _weighted_sum_bw)


# -- fused gate: G * a + (1 - G) * b ------------------------------------------

def _gate_merge_fw(attrs, gate, a, b):
    if not (gate.shape == a.shape == b.shape):
        raise ShapeError("gate-merge", "all operands must share one shape",
                         gate.shape, a.shape, b.shape)
    return b + gate * (a - b)


def _gate_merge_bw(attrs, y, g, gate, a, b):
    return g * (a - b), g * gate, g * (1.0 - gate)


register_op("gate-merge", _gate_merge_fw, _gate_merge_bw)


# ---------------------------------------------------------------------------
# graph
# ---------------------------------------------------------------------------

class Node:
    __slots__ = ("kind", "parents", "value", "attrs")

    def __init__(self, kind, parents, value, attrs):
        self.kind = kind
        self.parents = parents
        self.value = value
        self.attrs = attrs


class Graph:
    """Eager-forward tape.  Node ids are ints; construction order is topological."""

    def __init__(self, dtype=np.float64):
        dtype = np.dtype(dtype)
        if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            raise GraphError(f"unsupported dtype {dtype}")
        self.dtype = dtype
        self.nodes: list[Node] = []
        self._param_leaves: dict[str, int] = {}
        self._buffers: dict[int, tuple[np.ndarray, int]] = {}  # id(root) -> (root, elems)
        self._released = False

    # -- bookkeeping ----------------------------------------------------------

    def _track(self, arr: np.ndarray) -> None:
        root = _root(arr)
        key = id(root)
        if key not in self._buffers:
            self._buffers[key] = (root, root.size)
            METER.add(root.size)

    def release(self) -> None:
        """Drop allocation accounting for every buffer this graph created."""
        if not self._released:
            for _, elems in self._buffers.values():
                METER.sub(elems)
            self._buffers.clear()
            self._released = True

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.release()

    def __len__(self):
        return len(self.nodes)

    # -- construction -----------------------------------------------------------

    def leaf(self, value, name: str | None = None) -> int:
        value = np.asarray(value, dtype=self.dtype)
        self.nodes.append(Node("leaf", (), value, None))
        self._track(value)
        return len(self.nodes) - 1

    def apply(self, kind: str, inputs: Sequence[int], **attrs) -> int:
        if kind not in _FORWARD:
            raise GraphError(f"unknown op kind: {kind}")
        args = tuple(self.nodes[i].value for i in inputs)
        try:
            out = _FORWARD[kind](attrs, *args)
        except MemoryError:
            raise AllocationError(kind, sum(a.size for a in args)) from None
        self.nodes.append(Node(kind, tuple(inputs), out, attrs or None))
        self._track(out)
        return len(self.nodes) - 1

    # -- access ------------------------------------------------------------------

    def value(self, nid: int) -> np.ndarray:
        val = self.nodes[nid].value
        if val is None:
            raise GraphError(f"node {nid} was freed by backward(free_values=True)")
        return val

    def leaf_elems(self) -> int:
        """Total elements held by leaf buffers (parameters, inputs, masks),
        counting each underlying allocation once."""
        seen: set[int] = set()
        total = 0
        for node in self.nodes:
            if node.kind != "leaf" or node.value is None:
                continue
            root = _root(node.value)
            if id(root) not in seen:
                seen.add(id(root))
                total += root.size
        return total

    def shape(self, nid: int) -> tuple[int, ...]:
        return self.nodes[nid].value.shape

    # -- differentiation ----------------------------------------------------------

    def backward(
        self,
        loss: int,
        wrt: Iterable[int] | None = None,
        free_values: bool = False,
    ) -> dict[int, np.ndarray]:
        """Reverse sweep from ``loss`` (must be scalar-sized).

        With ``wrt=None`` the returned map holds a gradient for every node
        reachable from the loss.  With ``wrt`` given (training mode) interior
        gradients are freed as soon as they have been propagated, and only the
        requested nodes are kept — the live-memory footprint stays close to
        the forward tape.

        ``free_values=True`` (wrt mode only) additionally drops each interior
        node's forward value once the sweep has passed it.  This is safe
        because every consumer of a node has a higher id and is therefore
        processed earlier in the sweep; after that point the value can never
        be read again.  Leaves, the loss, and the ``wrt`` targets are kept.
        Reading a freed node through :meth:`value` afterwards raises.
        """
        lval = self.nodes[loss].value
        if lval.size != 1:
            raise GraphError(f"backward: loss must be scalar-sized, got shape {lval.shape}")
        keep = None if wrt is None else set(wrt)
        if free_values and keep is None:
            raise GraphError("free_values requires wrt")

        grads: dict[int, np.ndarray] = {}
        owned: set[int] = set()
        scratch: dict[int, tuple[int, int]] = {}  # id(root) -> (elems, refs)

        def scratch_add(arr):
            root = _root(arr)
            key = id(root)
            if key in scratch:
                elems, refs = scratch[key]
                scratch[key] = (elems, refs + 1)
            elif key in self._buffers:
                pass  # aliases a graph buffer; already counted
            else:
                scratch[key] = (root.size, 1)
                METER.add(root.size)

        def scratch_drop(arr):
            key = id(_root(arr))
            if key in scratch:
                elems, refs = scratch[key]
                if refs == 1:
                    del scratch[key]
                    METER.sub(elems)
                else:
                    scratch[key] = (elems, refs - 1)

        value_refs: dict[int, int] = {}  # id(root) -> nodes whose value aliases it
        if free_values:
            for node in self.nodes:
                if node.value is not None:
                    key = id(_root(node.value))
                    value_refs[key] = value_refs.get(key, 0) + 1

        def free_value(nid):
            node = self.nodes[nid]
            if node.kind == "leaf" or nid == loss or nid in keep or node.value is None:
                return
            key = id(_root(node.value))
            node.value = None
            count = value_refs.get(key, 0)
            if count > 1:
                value_refs[key] = count - 1
            elif count == 1:
                del value_refs[key]
                entry = self._buffers.pop(key, None)
                if entry is not None:
                    METER.sub(entry[1])

        seed = np.ones_like(lval)
        grads[loss] = seed
        owned.add(loss)
        scratch_add(seed)

        for nid in range(loss, -1, -1):
            g = grads.get(nid)
            if g is None:
                if free_values:
                    free_value(nid)
                continue
            node = self.nodes[nid]
            if node.parents:
                pvals = tuple(self.nodes[p].value for p in node.parents)
                pgrads = _BACKWARD[node.kind](node.attrs, node.value, g, *pvals)
                for pid, pg in zip(node.parents, pgrads):
                    if pg is None:
                        continue
                    cur = grads.get(pid)
                    if cur is None:
                        grads[pid] = pg
                        scratch_add(pg)
                    elif pid in owned:
                        np.add(cur, pg, out=cur)
                    else:
                        merged = cur + pg
                        scratch_drop(cur)
                        scratch_add(merged)
                        grads[pid] = merged
                        owned.add(pid)
            if keep is not None and nid not in keep:
                scratch_drop(grads[nid])
                del grads[nid]
                owned.discard(nid)
            if free_values:
                free_value(nid)

        # Hand the survivors' accounting over to the graph ledger: _track
        # counts each unique root once, then every root still in scratch gives
        # back the count scratch_add made for it.
        for arr in grads.values():
            self._track(arr)
        for elems, _ in scratch.values():
            METER.sub(elems)
        return grads


# ---------------------------------------------------------------------------
# functional helpers
# ---------------------------------------------------------------------------

def matmul(g, a, b):
    return g.apply("matmul", (a, b))


def add(g, a, b):
    return g.apply("add", (a, b))


def mul(g, a, b):
    return g.apply("mul", (a, b))


def sub(g, a, b):
    return g.apply("add", (a, g.apply("scalar-mul", (b,), alpha=-1.0)))


def concat(g, parts, axis):
    return g.apply("concat", tuple(parts), axis=axis)


def slice_node(g, x, axis: int, start: int, size: int):
    return g.apply("slice", (x,), axis=axis, start=start, size=size)


def split(g, x, axis: int, sizes: Sequence[int]) -> list[int]:
    """Split along ``axis`` into parts of the given sizes (inverse of concat)."""
    total = g.shape(x)[axis]
    if sum(sizes) != total:
        raise ShapeError("split", f"sizes {sizes} do not sum to axis length {total}", g.shape(x))
    out, start = [], 0
    for size in sizes:
        out.append(g.apply("slice", (x,), axis=axis, start=start, size=size))
        start += size
    return out


def tanh(g, x):
    return g.apply("tanh", (x,))


def sigmoid(g, x):
    return g.apply("sigmoid", (x,))


def relu(g, x):
    return g.apply("relu", (x,))


def exp(g, x):
    return g.apply("exp", (x,))


def log(g, x):
    return g.apply("log", (x,))


def absval(g, x):
    return g.apply("abs", (x,))


def softmax(g, x):
    return g.apply("softmax", (x,))


def reduce_sum(g, x, axis=None):
    return g.apply("sum", (x,), axis=axis)


def reduce_max(g, x, axis=None):
    return g.apply("max", (x,), axis=axis)


def scalar_mul(g, x, alpha):
    return g.apply("scalar-mul", (x,), alpha=float(alpha))


def scalar_add(g, x, beta):
    return g.apply("scalar-add", (x,), beta=float(beta))


def transpose(g, x, perm):
    return g.apply("transpose", (x,), perm=tuple(perm))


def swap_last(g, x):
    nd = g.value(x).ndim
    perm = list(range(nd))
    perm[-1], perm[-2] = perm[-2], perm[-1]
    return g.apply("transpose", (x,), perm=tuple(perm))


def reshape(g, x, shape):
    return g.apply("reshape", (x,), shape=tuple(shape))


def expand(g, x, axis, size):
    return g.apply("expand", (x,), axis=axis, size=size)


def embedding_lookup(g, table, ids):
    return g.apply("embedding-lookup", (table,), ids=np.asarray(ids))


def affine(g, w, x, b, act="none"):
    return g.apply("affine", (w, x, b), act=act)


def gate_merge(g, gate, a, b):
    return g.apply("gate-merge", (gate, a, b))


def weighted_sum(g, p, x):
    return g.apply("weighted-sum", (p, x))


def mean(g, x):
    n = g.value(x).size
    return scalar_mul(g, reduce_sum(g, x, axis=None), 1.0 / n)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

PARAM_KINDS = ("weight", "bias", "embedding")


class ParamStore:
    """Named parameter buffers plus per-parameter optimizer slots.

    Paths are unique slash-separated names.  ``kind`` decides what the L2
    penalty and the initializers treat the buffer as.
    """

    def __init__(self):
        self.values: dict[str, np.ndarray] = {}
        self.kinds: dict[str, str] = {}
        self.state: dict[str, dict[str, np.ndarray]] = {}

    def add(self, path: str, value: np.ndarray, kind: str = "weight") -> None:
        if path in self.values:
            raise GraphError(f"duplicate parameter path: {path}")
        if kind not in PARAM_KINDS:
            raise GraphError(f"unknown parameter kind: {kind}")
        self.values[path] = np.asarray(value)
        self.kinds[path] = kind

    def __getitem__(self, path: str) -> np.ndarray:
        return self.values[path]

    def __contains__(self, path: str) -> bool:
        return path in self.values

    def paths(self) -> list[str]:
        return list(self.values)

    def weight_paths(self) -> list[str]:
        return [p for p, k in self.kinds.items() if k == "weight"]

    def total_elems(self) -> int:
        return sum(v.size for v in self.values.values())

    def leaf(self, g: Graph, path: str) -> int:
        """Leaf node for ``path`` in graph ``g`` (one node per path per graph)."""
        nid = g._param_leaves.get(path)
        if nid is None:
            value = self.values[path]
            if value.dtype != g.dtype:
                raise GraphError(
                    f"parameter {path} has dtype {value.dtype}, graph wants {g.dtype}")
            nid = g.leaf(value, name=path)
            g._param_leaves[path] = nid
        return nid

    def grads_by_path(self, g: Graph, grads: Mapping[int, np.ndarray]) -> dict[str, np.ndarray]:
        out = {}
        for path, nid in g._param_leaves.items():
            got = grads.get(nid)
            if got is not None:
                out[path] = got
        return out

    def astype(self, dtype) -> "ParamStore":
        other = ParamStore()
        for path, value in self.values.items():
            other.add(path, value.astype(dtype), self.kinds[path])
        return other


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def finite_difference_check(build: Callable[[np.ndarray], tuple[Graph, int, int]],
                            theta: np.ndarray,
                            step: float = 1e-5) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``build(theta)`` must construct a fresh graph and return
    ``(graph, loss_node, theta_node)`` with a scalar-sized loss.  The function
    is evaluated twice at ``theta`` first; any bitwise difference means the
    build is nondeterministic and is reported as an error.
    """
    theta = np.asarray(theta, dtype=np.float64)

    def loss_at(t):
        g, loss, _ = build(t)
        v = float(np.asarray(g.value(loss)).reshape(()))
        g.release()
        return v

    g0, loss0, tnode = build(theta)
    base = float(np.asarray(g0.value(loss0)).reshape(()))
    again = loss_at(theta)
    if np.float64(base).tobytes() != np.float64(again).tobytes():
        g0.release()
        raise GraphError("finite_difference_check: build() is not deterministic")
    grads = g0.backward(loss0)
    analytic = np.array(grads.get(tnode, np.zeros_like(theta)), dtype=np.float64, copy=True)
    g0.release()

    worst = 0.0
    flat = theta.reshape(-1)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] += step
        up = loss_at(bumped.reshape(theta.shape))
        bumped[i] -= 2 * step
        down = loss_at(bumped.reshape(theta.shape))
        numeric = (up - down) / (2 * step)
        a = analytic.reshape(-1)[i]
        # the difference quotient carries ~ulp(loss)/step of round-off, so
        # coordinates below the floor are compared at the floor's absolute
        # scale rather than relatively
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
        worst = max(worst, err)
    return worst

"""Minimal reverse-mode differentiation over dense float64 numpy arrays.

Forward primitives take :class:`Node` (or plain arrays, treated as constants)
and return a :class:`Node`.  When any input lives on a :class:`Tape`, the
primitive appends a record holding its vector-Jacobian product; ``backward``
replays the records in reverse.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from .. import kernels
from ..errors import NotScalarLoss, ShapeMismatch

LOG_CLAMP = 1e-12

# op name -> multiplier applied to that op's backward (test hook only)
_FAULTS: dict[str, float] = {}


@contextlib.contextmanager
def inject_fault(op: str, scale: float = 2.0):
    """Scale the backward rule of primitive ``op`` while the block runs."""
    _FAULTS[op] = scale
    try:
        yield
    finally:
        _FAULTS.pop(op, None)


class Node:
    __slots__ = ("value", "tape", "index")

    def __init__(self, value, tape: "Tape | None" = None, index: int = -1):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(shape={self.value.shape}, tracked={self.tape is not None})"


class Tape:
    """Ordered record of executed primitives."""

    def __init__(self):
        self.records: list[tuple[str, int, tuple, Callable]] = []
        self.params: dict[str, Node] = {}
        self._count = 0

    def _new(self, value) -> Node:
        node = Node(value, self, self._count)
        self._count += 1
        return node

    def param(self, store, key: str) -> Node:
        """Leaf node bound to ``store[key]``; one leaf per key per tape."""
        if key not in self.params:
            self.params[key] = self._new(store[key])
        return self.params[key]

    def watch(self, value) -> Node:
        """Leaf node for an array that is not part of a ParamStore."""
        return self._new(np.asarray(value, dtype=np.float64))

    def __len__(self):
        return len(self.records)


def constant(value) -> Node:
    return Node(np.asarray(value, dtype=np.float64))


def _lift(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _emit(op: str, value, inputs: Sequence[Node], vjp: Callable) -> Node:
    tape = next((n.tape for n in inputs if n.tape is not None), None)
    if tape is None:
        return Node(value)
    out = tape._new(value)
    tape.records.append((op, out.index, tuple(inputs), vjp))
    return out


def _check(cond: bool, op: str, *shapes):
    if not cond:
        raise ShapeMismatch(f"{op}: incompatible shapes " + " and ".join(str(tuple(s)) for s in shapes))


# ---------------------------------------------------------------------------
# elementwise & linear algebra


def matmul(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    _check(a.value.ndim == 2 and b.value.ndim == 2 and a.shape[1] == b.shape[0], "matmul", a.shape, b.shape)
    av, bv = a.value, b.value
    return _emit("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    _check(a.shape == b.shape, "add", a.shape, b.shape)
    return _emit("add", a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    _check(a.shape == b.shape, "sub", a.shape, b.shape)
    return _emit("sub", a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    _check(a.shape == b.shape, "mul", a.shape, b.shape)
    av, bv = a.value, b.value
    return _emit("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def affine(a, scale: float = 1.0, shift: float = 0.0) -> Node:
    """``scale * a + shift`` for python scalars."""
    a = _lift(a)
    return _emit("affine", scale * a.value + shift, (a,), lambda g: (scale * g,))


def add_bias(x, b) -> Node:
    x, b = _lift(x), _lift(b)
    _check(x.value.ndim == 2 and b.value.ndim == 1 and x.shape[1] == b.shape[0], "add_bias", x.shape, b.shape)
    return _emit("add_bias", x.value + b.value, (x, b), lambda g: (g, g.sum(axis=0)))


def total(a) -> Node:
    a = _lift(a)
    shape = a.shape
    return _emit("sum", np.array(a.value.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def mean(a) -> Node:
    a = _lift(a)
    shape, n = a.shape, a.value.size
    return _emit("mean", np.array(a.value.mean()), (a,), lambda g: (np.full(shape, float(g) / n),))


def sigmoid(a) -> Node:
    a = _lift(a)
    x = a.value
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a) -> Node:
    a = _lift(a)
    mask = a.value > 0
    return _emit("relu", np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def log_clamped(a, floor: float = LOG_CLAMP) -> Node:
    """``log(max(a, floor))``; zero gradient where the clamp is active."""
    a = _lift(a)
    x = a.value
    live = x > floor
    safe = np.where(live, x, floor)
    return _emit("log", np.log(safe), (a,), lambda g: (np.where(live, g / safe, 0.0),))


def transpose(a) -> Node:
    a = _lift(a)
    return _emit("transpose", a.value.T.copy(), (a,), lambda g: (g.T,))


# ---------------------------------------------------------------------------
# structural


def concat_rows(parts: Sequence) -> Node:
    parts = [_lift(p) for p in parts]
    widths = {p.shape[1:] for p in parts}
    _check(len(widths) == 1, "concat_rows", *(p.shape for p in parts))
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])
    value = np.concatenate([p.value for p in parts], axis=0)
    return _emit("concat_rows", value, parts,
                 lambda g: tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts))))


def concat_cols(parts: Sequence) -> Node:
    parts = [_lift(p) for p in parts]
    rows = {p.shape[0] for p in parts}
    _check(len(rows) == 1 and all(p.value.ndim == 2 for p in parts), "concat_cols", *(p.shape for p in parts))
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])
    value = np.concatenate([p.value for p in parts], axis=1)
    return _emit("concat_cols", value, parts,
                 lambda g: tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts))))


def gather_rows(x, index) -> Node:
    x = _lift(x)
    index = np.asarray(index, dtype=np.int64)
    n = x.shape[0]
    value = x.value[index]
    if x.value.ndim == 1:
        return _emit("gather_rows", value, (x,),
                     lambda g: (kernels.scatter_add_rows(g[:, None], index, n)[:, 0],))
    return _emit("gather_rows", value, (x,), lambda g: (kernels.scatter_add_rows(g, index, n),))


def block_diag_columns(vectors: Sequence) -> Node:
    """Stack ``h`` row vectors of width ``k`` into a (h*k, h) block-diagonal matrix.

    Column ``i`` holds vector ``i`` in rows ``i*k:(i+1)*k``.  Multiplying a
    matrix whose column blocks are per-head features by this gives one score
    column per head.
    """
    vectors = [_lift(v) for v in vectors]
    h = len(vectors)
    k = vectors[0].value.size
    _check(all(v.value.size == k for v in vectors), "block_diag_columns", *(v.shape for v in vectors))
    value = np.zeros((h * k, h))
    for i, v in enumerate(vectors):
        value[i * k:(i + 1) * k, i] = v.value.ravel()
    shapes = [v.shape for v in vectors]
    return _emit("block_diag_columns", value, vectors,
                 lambda g: tuple(g[i * k:(i + 1) * k, i].reshape(shapes[i]) for i in range(h)))


# ---------------------------------------------------------------------------
# normalisation & attention


def softmax_rows(a) -> Node:
    a = _lift(a)
    x = a.value
    _check(x.ndim == 2, "softmax_rows", x.shape)
    e = np.exp(x - x.max(axis=1, keepdims=True))
    y = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        # shifting g by a per-row constant leaves the result unchanged (rows of
        # y sum to 1) and makes a constant upstream gradient map to exact zeros
        g = g - g[:, :1]
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _emit("softmax_rows", y, (a,), vjp)


def layer_norm_rows(x, gain, bias, eps: float = 1e-5) -> Node:
    """Row-wise layer normalisation with population variance."""
    x, gain, bias = _lift(x), _lift(gain), _lift(bias)
    xv = x.value
    _check(xv.ndim == 2 and gain.shape == (xv.shape[1],) and bias.shape == gain.shape,
           "layer_norm_rows", xv.shape, gain.shape, bias.shape)
    d = xv.shape[1]
    mu = xv.mean(axis=1, keepdims=True)
    xc = xv - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    gv = gain.value

    def vjp(g):
        gx_hat = g * gv
        gx = inv * (gx_hat - gx_hat.mean(axis=1, keepdims=True)
                    - xhat * (gx_hat * xhat).sum(axis=1, keepdims=True) / d)
        return gx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _emit("layer_norm", xhat * gv + bias.value, (x, gain, bias), vjp)


def layer_norm_row(x, gain, bias, eps: float = 1e-5) -> Node:
    """Single-vector form of :func:`layer_norm_rows`."""
    x = _lift(x)
    out = layer_norm_rows(reshape(x, (1, x.shape[0])), gain, bias, eps)
    return reshape(out, (x.shape[0],))


def reshape(a, shape) -> Node:
    a = _lift(a)
    old = a.shape
    return _emit("reshape", a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def segment_softmax(scores, ptr) -> Node:
    """Softmax within each row segment, independently per column."""
    scores = _lift(scores)
    w = kernels.segment_softmax(scores.value, ptr)
    return _emit("segment_softmax", w, (scores,), lambda g: (kernels.segment_softmax_backward(w, g, ptr),))


def segment_weighted_sum(weights, values, ptr) -> Node:
    """Per segment, sum value rows scaled by their per-head weight column."""
    weights, values = _lift(weights), _lift(values)
    _check(weights.shape[0] == values.shape[0] and values.shape[1] % weights.shape[1] == 0,
           "segment_weighted_sum", weights.shape, values.shape)
    wv, vv = weights.value, values.value
    out = kernels.segment_weighted_sum(wv, vv, ptr)
    return _emit("segment_weighted_sum", out, (weights, values),
                 lambda g: kernels.segment_weighted_sum_backward(wv, vv, g, ptr))


# ---------------------------------------------------------------------------
# reverse sweep


def backward(tape: Tape, loss: Node, store=None) -> dict[str, np.ndarray]:
    """Gradient of scalar ``loss`` w.r.t. every parameter leaf of ``tape``.

    When ``store`` is given its gradient buffers are overwritten; keys the
    loss does not reach get zeros.
    """
    if loss.value.size != 1:
        raise NotScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    if loss.tape is not tape:
        raise ValueError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
    for op, out_index, inputs, vjp in reversed(tape.records):
        g = grads.pop(out_index, None)
        if g is None:
            continue
        in_grads = vjp(g)
        scale = _FAULTS.get(op)
        for node, gi in zip(inputs, in_grads):
            if node.tape is None or gi is None:
                continue
            if scale is not None:
                gi = gi * scale
            prev = grads.get(node.index)
            grads[node.index] = gi if prev is None else prev + gi
    result = {
        key: np.asarray(grads.get(node.index, np.zeros_like(node.value)), dtype=np.float64).reshape(node.shape)
        for key, node in tape.params.items()
    }
    if store is not None:
        for key in store.keys():
            if key not in result:
                result[key] = np.zeros_like(store[key])
        store.zero_grad()
        for key in store.keys():
            store.grads[key] = result[key].copy()
    return result


def gradient_of(tape: Tape, loss: Node, node: Node) -> np.ndarray:
    """Gradient of ``loss`` w.r.t. one watched leaf (testing helper)."""
    probe = "__watched__%d" % node.index
    tape.params[probe] = node
    try:
        return backward(tape, loss)[probe]
    finally:
        del tape.params[probe]

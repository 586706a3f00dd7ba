"""Segment kernels behind set-attention pooling.

The compiled extension (``hypercare._kernels``) is used when it was built;
otherwise the numpy implementations below are used.  Set
``HYPERCARE_KERNELS=python`` to force the fallback.

Layout conventions: ``ptr`` is an int64 array of segment boundaries (segment
``s`` owns rows ``ptr[s]:ptr[s+1]``, never empty); ``weights`` has one column
per attention head and ``values`` stores the heads as contiguous column blocks.
"""

from __future__ import annotations

import os

import numpy as np


def _segment_ids(ptr: np.ndarray) -> np.ndarray:
    return np.repeat(np.arange(len(ptr) - 1), np.diff(ptr))


def segment_softmax_py(scores: np.ndarray, ptr: np.ndarray) -> np.ndarray:
    starts = ptr[:-1]
    seg = _segment_ids(ptr)
    mx = np.maximum.reduceat(scores, starts, axis=0)
    e = np.exp(scores - mx[seg])
    return e / np.add.reduceat(e, starts, axis=0)[seg]


def segment_softmax_backward_py(weights: np.ndarray, grad: np.ndarray, ptr: np.ndarray) -> np.ndarray:
    seg = _segment_ids(ptr)
    dot = np.add.reduceat(weights * grad, ptr[:-1], axis=0)
    return weights * (grad - dot[seg])


def segment_weighted_sum_py(weights: np.ndarray, values: np.ndarray, ptr: np.ndarray) -> np.ndarray:
    dh = values.shape[1] // weights.shape[1]
    wide = np.repeat(weights, dh, axis=1)
    return np.add.reduceat(wide * values, ptr[:-1], axis=0)


def segment_weighted_sum_backward_py(weights, values, grad, ptr):
    h = weights.shape[1]
    dh = values.shape[1] // h
    g = grad[_segment_ids(ptr)]
    grad_w = (g * values).reshape(len(values), h, dh).sum(axis=2)
    grad_v = np.repeat(weights, dh, axis=1) * g
    return grad_w, grad_v


def scatter_add_rows_py(grad: np.ndarray, index: np.ndarray, n_rows: int) -> np.ndarray:
    out = np.zeros((n_rows, grad.shape[1]))
    np.add.at(out, index, grad)
    return out


_PY = {
    "segment_softmax": segment_softmax_py,
    "segment_softmax_backward": segment_softmax_backward_py,
    "segment_weighted_sum": segment_weighted_sum_py,
    "segment_weighted_sum_backward": segment_weighted_sum_backward_py,
    "scatter_add_rows": scatter_add_rows_py,
}


def _load_compiled():
    if os.environ.get("HYPERCARE_KERNELS", "").lower() == "python":
        return None
    try:
        from . import _kernels
    except ImportError:
        return None
    return {name: getattr(_kernels, name) for name in _PY}


_COMPILED = _load_compiled()
BACKEND = "compiled" if _COMPILED is not None else "python"


def available_backends() -> list[str]:
    return ["python"] + (["compiled"] if _COMPILED is not None else [])


def get_backend(name: str | None = None) -> dict:
    """Return the kernel table for ``name`` (default: the selected backend)."""
    name = name or BACKEND
    if name == "python":
        return _PY
    if name == "compiled" and _COMPILED is not None:
        return _COMPILED
    raise ValueError(f"kernel backend {name!r} is not available")


_active = get_backend()


def use_backend(name: str) -> None:
    """Switch the process-wide kernel backend."""
    global _active, BACKEND
    _active = get_backend(name)
    BACKEND = name


def _i64(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.int64)


def _f64(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64)


def segment_softmax(scores, ptr):
    return _active["segment_softmax"](_f64(scores), _i64(ptr))


def segment_softmax_backward(weights, grad, ptr):
    return _active["segment_softmax_backward"](_f64(weights), _f64(grad), _i64(ptr))


def segment_weighted_sum(weights, values, ptr):
    return _active["segment_weighted_sum"](_f64(weights), _f64(values), _i64(ptr))


def segment_weighted_sum_backward(weights, values, grad, ptr):
    return _active["segment_weighted_sum_backward"](_f64(weights), _f64(values), _f64(grad), _i64(ptr))


def scatter_add_rows(grad, index, n_rows):
    return _active["scatter_add_rows"](_f64(grad), _i64(index), int(n_rows))

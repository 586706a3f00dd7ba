# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled segment kernels for set-attention pooling over ragged incidences.

Every array is C-contiguous float64 (values) or int64 (indices).  A segment
``s`` covers rows ``ptr[s]:ptr[s + 1]``; segments are never empty.
"""

import numpy as np

from libc.math cimport exp


def segment_softmax(const double[:, ::1] scores, const long long[::1] ptr):
    cdef Py_ssize_t nseg = ptr.shape[0] - 1
    cdef Py_ssize_t h = scores.shape[1]
    out_arr = np.empty((scores.shape[0], h), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t s, r, c
    cdef double mx, total
    with nogil:
        for s in range(nseg):
            for c in range(h):
                mx = scores[ptr[s], c]
                for r in range(ptr[s] + 1, ptr[s + 1]):
                    if scores[r, c] > mx:
                        mx = scores[r, c]
                total = 0.0
                for r in range(ptr[s], ptr[s + 1]):
                    out[r, c] = exp(scores[r, c] - mx)
                    total = total + out[r, c]
                for r in range(ptr[s], ptr[s + 1]):
                    out[r, c] = out[r, c] / total
    return out_arr


def segment_softmax_backward(const double[:, ::1] weights, const double[:, ::1] grad,
                             const long long[::1] ptr):
    cdef Py_ssize_t nseg = ptr.shape[0] - 1
    cdef Py_ssize_t h = weights.shape[1]
    out_arr = np.empty((weights.shape[0], h), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t s, r, c
    cdef double dot
    with nogil:
        for s in range(nseg):
            for c in range(h):
                dot = 0.0
                for r in range(ptr[s], ptr[s + 1]):
                    dot = dot + weights[r, c] * grad[r, c]
                for r in range(ptr[s], ptr[s + 1]):
                    out[r, c] = weights[r, c] * (grad[r, c] - dot)
    return out_arr


def segment_weighted_sum(const double[:, ::1] weights, const double[:, ::1] values,
                         const long long[::1] ptr):
    cdef Py_ssize_t nseg = ptr.shape[0] - 1
    cdef Py_ssize_t h = weights.shape[1]
    cdef Py_ssize_t d = values.shape[1]
    cdef Py_ssize_t dh = d // h
    out_arr = np.zeros((nseg, d), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t s, r, c
    with nogil:
        for s in range(nseg):
            for r in range(ptr[s], ptr[s + 1]):
                for c in range(d):
                    out[s, c] = out[s, c] + weights[r, c // dh] * values[r, c]
    return out_arr


def segment_weighted_sum_backward(const double[:, ::1] weights, const double[:, ::1] values,
                                  const double[:, ::1] grad, const long long[::1] ptr):
    cdef Py_ssize_t nseg = ptr.shape[0] - 1
    cdef Py_ssize_t h = weights.shape[1]
    cdef Py_ssize_t d = values.shape[1]
    cdef Py_ssize_t dh = d // h
    gw_arr = np.zeros((weights.shape[0], h), dtype=np.float64)
    gv_arr = np.empty((values.shape[0], d), dtype=np.float64)
    cdef double[:, ::1] gw = gw_arr
    cdef double[:, ::1] gv = gv_arr
    cdef Py_ssize_t s, r, c, k
    with nogil:
        for s in range(nseg):
            for r in range(ptr[s], ptr[s + 1]):
                for c in range(d):
                    k = c // dh
                    gw[r, k] = gw[r, k] + grad[s, c] * values[r, c]
                    gv[r, c] = weights[r, k] * grad[s, c]
    return gw_arr, gv_arr


def scatter_add_rows(const double[:, ::1] grad, const long long[::1] index, Py_ssize_t n_rows):
    cdef Py_ssize_t m = grad.shape[0]
    cdef Py_ssize_t d = grad.shape[1]
    out_arr = np.zeros((n_rows, d), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, c, row
    with nogil:
        for i in range(m):
            row = index[i]
            for c in range(d):
                out[row, c] = out[row, c] + grad[i, c]
    return out_arr

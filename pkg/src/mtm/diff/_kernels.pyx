# Compiled counterparts of the functions in _reference.py.
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, INFINITY

cnp.import_array()


def softmax_fwd(const double[:, ::1] x, mask):
    cdef const unsigned char[:, ::1] m = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef Py_ssize_t rows = x.shape[0], n = x.shape[1], r, k
    out = np.zeros((rows, n))
    cdef double[:, ::1] y = out
    cdef double top, s, e
    cdef bint any_present, has_nan
    for r in range(rows):
        top = -INFINITY
        any_present = False
        has_nan = False
        for k in range(n):
            if m[r, k]:
                any_present = True
                if x[r, k] != x[r, k]:
                    has_nan = True
                elif x[r, k] > top:
                    top = x[r, k]
        if not any_present:
            continue
        # same conventions as the numpy version: NaN propagates, a non-finite
        # maximum is replaced by 0 before exponentiating
        if has_nan or top == INFINITY or top == -INFINITY:
            top = 0.0
        s = 0.0
        for k in range(n):
            if m[r, k]:
                e = exp(x[r, k] - top)
                y[r, k] = e
                s += e
        if s == 0.0:
            continue
        for k in range(n):
            if m[r, k]:
                y[r, k] = y[r, k] / s
    return out


def softmax_bwd(const double[:, ::1] y, const double[:, ::1] gy):
    cdef Py_ssize_t rows = y.shape[0], n = y.shape[1], r, k
    out = np.empty((rows, n))
    cdef double[:, ::1] gx = out
    cdef double dot
    for r in range(rows):
        dot = 0.0
        for k in range(n):
            dot += y[r, k] * gy[r, k]
        for k in range(n):
            gx[r, k] = y[r, k] * (gy[r, k] - dot)
    return out


def masked_max_fwd(const double[:, :, ::1] x, mask):
    cdef const unsigned char[:, :, ::1] m = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef Py_ssize_t outer = x.shape[0], n = x.shape[1], inner = x.shape[2]
    cdef Py_ssize_t o, k, i
    out_a = np.zeros((outer, inner))
    arg_a = np.full((outer, inner), -1, dtype=np.int64)
    cdef double[:, ::1] out = out_a
    cdef cnp.int64_t[:, ::1] arg = arg_a
    for o in range(outer):
        for k in range(n):
            for i in range(inner):
                if m[o, k, i] and (arg[o, i] < 0 or x[o, k, i] > out[o, i]
                                   or (x[o, k, i] != x[o, k, i] and out[o, i] == out[o, i])):
                    out[o, i] = x[o, k, i]
                    arg[o, i] = k
    return out_a, arg_a


def masked_max_bwd(const double[:, ::1] g, const cnp.int64_t[:, ::1] arg, Py_ssize_t n):
    cdef Py_ssize_t outer = g.shape[0], inner = g.shape[1], o, i
    gx_a = np.zeros((outer, n, inner))
    cdef double[:, :, ::1] gx = gx_a
    for o in range(outer):
        for i in range(inner):
            if arg[o, i] >= 0:
                gx[o, arg[o, i], i] = g[o, i]
    return gx_a


def scatter_add_rows(const cnp.int64_t[::1] idx, const double[:, ::1] src, Py_ssize_t n_rows):
    cdef Py_ssize_t m = src.shape[0], k = src.shape[1], r, c, dst
    out_a = np.zeros((n_rows, k))
    cdef double[:, ::1] out = out_a
    for r in range(m):
        dst = idx[r]
        for c in range(k):
            out[dst, c] += src[r, c]
    return out_a

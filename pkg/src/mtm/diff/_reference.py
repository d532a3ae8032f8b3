"""Pure-numpy kernels. Same signatures as the compiled ``_kernels`` module."""

import numpy as np


def softmax_fwd(x, mask):
    """Row softmax over the last axis of a 2-D array, restricted to ``mask``.

    Rows without any unmasked entry come back as all zeros.
    """
    neg = np.where(mask, x, -np.inf)
    top = neg.max(axis=1, keepdims=True)
    top[~np.isfinite(top)] = 0.0
    e = np.where(mask, np.exp(neg - top), 0.0)
    s = e.sum(axis=1, keepdims=True)
    s[s == 0.0] = 1.0
    return np.where(mask, e / s, 0.0)


def softmax_bwd(y, gy):
    dot = (y * gy).sum(axis=1, keepdims=True)
    return y * (gy - dot)


def masked_max_fwd(x, mask):
    """Max over axis 1 of an (outer, n, inner) array; first maximiser wins."""
    neg = np.where(mask, x, -np.inf)
    arg = neg.argmax(axis=1)
    out = np.take_along_axis(neg, arg[:, None, :], axis=1)[:, 0, :]
    empty = ~mask.any(axis=1)
    out[empty] = 0.0
    arg[empty] = -1
    return out, arg


def masked_max_bwd(g, arg, n):
    outer, inner = g.shape
    gx = np.zeros((outer, n, inner))
    ok = arg >= 0
    o, i = np.nonzero(ok)
    gx[o, arg[o, i], i] = g[o, i]
    return gx


def scatter_add_rows(idx, src, n_rows):
    out = np.zeros((n_rows, src.shape[1]))
    np.add.at(out, idx, src)
    return out

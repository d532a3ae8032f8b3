"""Reverse-mode differentiable arrays recorded on an explicit tape.

Every primitive produces a new :class:`DiffArray`. When a :class:`Tape` is
active and at least one input is tracked (a ``requires_grad`` leaf or an
earlier node of the same tape), the primitive appends a node holding its
vector-Jacobian product. :meth:`Tape.backward` walks the nodes once, in
reverse record order.

Masks are plain numpy boolean arrays (``True`` = participates). Masked
positions never influence an output: the reductions read them through
``np.where`` so stored values there can be anything finite.
"""

from __future__ import annotations

import numpy as np

from mtm.diff import kernels

_ACTIVE: list["Tape"] = []


class DimensionError(ValueError):
    pass


class DegenerateError(ValueError):
    """A reduction group or softmax row had no unmasked element."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


def current_tape():
    return _ACTIVE[-1] if _ACTIVE else None


class DiffArray:
    """An n-d float64 array that can take part in a recorded computation."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        self.data = np.require(data, dtype=np.float64, requirements="C")
        self.requires_grad = requires_grad
        self.grad = None
        self.node = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def __repr__(self):
        tag = f", node={self.node}" if self.node is not None else ""
        return f"DiffArray(shape={self.shape}{tag})"

    def _tracked(self, tape):
        return self.requires_grad or (self._tape is tape and self.node is not None)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, DiffArray):
            raise TypeError("division by a DiffArray is not supported")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)


class Tape:
    """Ordered record of primitive operations.

    Use as a context manager; operations executed inside are recorded.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def _ensure(self, x):
        if x._tape is not self or x.node is None:
            x._tape = self
            x.node = len(self.nodes)
            self.nodes.append((x, (), None))
        return x.node

    def record(self, out, parents, vjp):
        for p in parents:
            if p._tracked(self):
                self._ensure(p)
        out._tape = self
        out.node = len(self.nodes)
        self.nodes.append((out, parents, vjp))

    def backward(self, root, seed=None):
        """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every tracked leaf.

        Returns a dict mapping node id to gradient for all visited nodes.
        """
        if root._tape is not self or root.node is None:
            raise ValueError("root was not produced on this tape")
        grads = [None] * len(self.nodes)
        grads[root.node] = np.ones_like(root.data) if seed is None else np.asarray(seed, dtype=np.float64)
        for nid in range(root.node, -1, -1):
            g = grads[nid]
            if g is None:
                continue
            out, parents, vjp = self.nodes[nid]
            if vjp is None:
                if out.requires_grad:
                    out.grad = g if out.grad is None else out.grad + g
                continue
            for p, gp in zip(parents, vjp(g)):
                if gp is None or p._tape is not self or p.node is None:
                    continue
                prev = grads[p.node]
                grads[p.node] = gp if prev is None else prev + gp
        return {i: g for i, g in enumerate(grads) if g is not None}


def _as_array(x):
    return x if isinstance(x, DiffArray) else DiffArray(x)


def _emit(data, parents, vjp):
    out = DiffArray(data)
    tape = current_tape()
    if tape is not None and any(p._tracked(tape) for p in parents):
        tape.record(out, parents, vjp)
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# elementwise ----------------------------------------------------------------

def add(a, b):
    a, b = _as_array(a), _as_array(b)
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _as_array(a), _as_array(b)
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _as_array(a), _as_array(b)
    return _emit(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a, k):
    k = float(k)
    return _emit(a.data * k, (a,), lambda g: (g * k,))


def mask_fill(x, mask):
    """Zero ``x`` wherever the (broadcastable) boolean ``mask`` is False."""
    m = np.asarray(mask, dtype=bool)
    return _emit(np.where(m, x.data, 0.0), (x,),
                 lambda g: (_unbroadcast(np.where(m, g, 0.0), x.shape),))


def relu(x):
    pos = x.data > 0
    return _emit(np.maximum(x.data, 0.0), (x,), lambda g: (np.where(pos, g, 0.0),))


def exp(x):
    y = np.exp(x.data)
    return _emit(y, (x,), lambda g: (g * y,))


def dropout(x, rate, rng=None, train=False):
    """Inverted dropout. Identity unless ``train`` and ``rate > 0``."""
    if not train or rate <= 0.0:
        return x
    keep = rng.random(x.shape, dtype=np.float32) >= rate
    factor = np.where(keep, 1.0 / (1.0 - rate), 0.0)
    return _emit(x.data * factor, (x,), lambda g: (g * factor,))


# shape ------------------------------------------------------------------------

def reshape(x, shape):
    old = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def swapaxes(x, a, b):
    return _emit(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def broadcast_to(x, shape):
    return _emit(np.broadcast_to(x.data, shape), (x,), lambda g: (_unbroadcast(g, x.shape),))


def getitem(x, key):
    """Basic (slice/int) indexing."""
    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return (gx,)
    return _emit(x.data[key], (x,), vjp)


def concat(arrays, axis=0):
    arrays = [_as_array(a) for a in arrays]
    sizes = [a.shape[axis] for a in arrays]
    cuts = np.cumsum(sizes)[:-1]
    return _emit(np.concatenate([a.data for a in arrays], axis=axis), tuple(arrays),
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(arrays, axis=0):
    arrays = [_as_array(a) for a in arrays]
    return _emit(np.stack([a.data for a in arrays], axis=axis), tuple(arrays),
                 lambda g: tuple(np.moveaxis(g, axis, 0)))


def take_rows(x, index):
    """Gather rows of ``x`` along axis 0: ``out[k] = x[index[k]]``.

    ``index`` may have any shape; the output shape is
    ``index.shape + x.shape[1:]``. The backward pass is a scatter-add, so
    repeated indices accumulate.
    """
    index = np.asarray(index, dtype=np.int64)
    n = x.shape[0]
    tail = x.shape[1:]

    def vjp(g):
        flat = np.ascontiguousarray(g.reshape(-1, int(np.prod(tail, dtype=np.int64))))
        gx = kernels.scatter_add_rows(np.ascontiguousarray(index.reshape(-1)), flat, n)
        return (gx.reshape(x.shape),)

    return _emit(x.data[index], (x,), vjp)


def embedding(table, ids):
    """Row lookup into an embedding table."""
    return take_rows(table, ids)


# reductions -------------------------------------------------------------------

def sum_(x, axis=None, keepdims=False):
    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _emit(x.data.sum(axis=axis, keepdims=keepdims), (x,), vjp)


def mean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


# linear algebra ------------------------------------------------------------------

def matmul(a, b):
    a, b = _as_array(a), _as_array(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    if b.ndim == 2:
        # (..., K) x (K, N): fold the batch dims into one GEMM
        a2 = a.data.reshape(-1, a.shape[-1])

        def vjp2(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

        return _emit((a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],)), (a, b), vjp2)

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit(a.data @ b.data, (a, b), vjp)


def linear(x, weight, bias=None):
    """``x @ weight + bias`` with weight stored as (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalise over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    d = x.shape[-1]

    def vjp(g):
        gg = g * gamma.data
        gx = inv * (gg - gg.mean(axis=-1, keepdims=True)
                    - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        gbeta = g.reshape(-1, d).sum(axis=0)
        return gx, ggamma, gbeta

    return _emit(xhat * gamma.data + beta.data, (x, gamma, beta), vjp)


# masked operations ------------------------------------------------------------------

def _moved(x, axis):
    axis = axis % x.ndim
    return np.moveaxis(x, axis, -1), axis


def masked_softmax(logits, mask, axis=-1, allow_empty=False):
    """Softmax along ``axis`` over entries where ``mask`` is True.

    Masked entries are exactly 0. A row with no unmasked entry raises
    :class:`DegenerateError` unless ``allow_empty``, in which case the row is
    all zeros and carries no gradient.
    """
    m = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
    xm, ax = _moved(logits.data, axis)
    mm, _ = _moved(m, axis)
    lead = xm.shape[:-1]
    x2 = np.ascontiguousarray(xm.reshape(-1, xm.shape[-1]))
    m2 = np.ascontiguousarray(mm.reshape(-1, xm.shape[-1]))
    if not allow_empty:
        empty = ~m2.any(axis=1)
        if empty.any():
            row = np.unravel_index(int(np.argmax(empty)), lead) if lead else ()
            raise DegenerateError(f"masked_softmax: row {row} is fully masked", row)
    y2 = kernels.softmax_fwd(x2, m2)
    y = np.moveaxis(y2.reshape(xm.shape), -1, ax)

    def vjp(g):
        gm = np.ascontiguousarray(np.moveaxis(g, ax, -1).reshape(-1, xm.shape[-1]))
        gx = kernels.softmax_bwd(y2, gm)
        return (np.moveaxis(gx.reshape(xm.shape), -1, ax),)

    return _emit(y, (logits,), vjp)


def _three_way(shape, axis):
    axis = axis % len(shape)
    outer = int(np.prod(shape[:axis], dtype=np.int64))
    inner = int(np.prod(shape[axis + 1:], dtype=np.int64))
    return axis, outer, shape[axis], inner


def _check_groups(any_obs, name, out_shape):
    if not any_obs.all():
        flat = int(np.argmin(any_obs.reshape(-1)))
        idx = np.unravel_index(flat, out_shape) if out_shape else ()
        raise DegenerateError(f"{name}: group {idx} has no unmasked element", idx)


def masked_max(x, mask, axis, allow_empty=False):
    """Maximum over ``axis`` of unmasked entries.

    Gradient goes to the first maximiser (lowest index). Empty groups raise
    unless ``allow_empty``, which yields 0 with no gradient.
    """
    m = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    axis, outer, n, inner = _three_way(x.shape, axis)
    out_shape = x.shape[:axis] + x.shape[axis + 1:]
    x3 = np.ascontiguousarray(x.data.reshape(outer, n, inner))
    m3 = np.ascontiguousarray(m.reshape(outer, n, inner))
    out, arg = kernels.masked_max_fwd(x3, m3)
    if not allow_empty:
        _check_groups(arg >= 0, "masked_max", out_shape)

    def vjp(g):
        g2 = np.ascontiguousarray(g.reshape(outer, inner))
        return (kernels.masked_max_bwd(g2, arg, n).reshape(x.shape),)

    return _emit(out.reshape(out_shape), (x,), vjp)


def masked_mean(x, mask, axis, allow_empty=False):
    """Mean over ``axis`` of unmasked entries (denominator = unmasked count)."""
    m = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    axis = axis % x.ndim
    count = m.sum(axis=axis)
    if not allow_empty:
        _check_groups(count > 0, "masked_mean", count.shape)
    denom = np.maximum(count, 1).astype(np.float64)
    out = np.where(m, x.data, 0.0).sum(axis=axis) / denom

    def vjp(g):
        return (np.where(m, np.expand_dims(g / denom, axis), 0.0),)

    return _emit(out, (x,), vjp)


def maximum_of(arrays):
    """Elementwise maximum across a list of equally shaped arrays."""
    stacked = stack(arrays, axis=0)
    return masked_max(stacked, np.ones(stacked.shape, dtype=bool), axis=0)


# loss ---------------------------------------------------------------------------

def softmax_cross_entropy(logits, labels, weights=None):
    """Mean (optionally weighted) cross-entropy of (B, M) logits."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data
    if z.ndim == 1:
        z = z[None, :]
    top = z.max(axis=1, keepdims=True)
    lse = top[:, 0] + np.log(np.exp(z - top).sum(axis=1))
    rows = np.arange(z.shape[0])
    nll = lse - z[rows, labels]
    w = np.ones(z.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)[labels]
    total = w.sum()
    p = np.exp(z - lse[:, None])

    def vjp(g):
        gz = p.copy()
        gz[rows, labels] -= 1.0
        gz *= (w / total)[:, None] * g
        return (gz.reshape(logits.shape),)

    return _emit(np.asarray((w * nll).sum() / total), (logits,), vjp)


def parameter(data):
    return DiffArray(data, requires_grad=True)


def constant(data):
    return DiffArray(data)

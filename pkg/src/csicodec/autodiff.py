"""Reverse-mode automatic differentiation on numpy arrays.

A :class:`Tape` records operations in execution order while it is active as a
context manager; :func:`backward` replays the record in reverse and accumulates
gradients into the leaf arrays. Outside a tape, ops compute values only, which
is the fast path used for evaluation.

Everything is float64 so central finite differences are a meaningful oracle
for every backward rule.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import NonFiniteInput, NonScalarLoss, ShapeMismatch

_SQRT_HALF = math.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_ACTIVE_TAPE = None


class Tape:
    """Ordered operation record for one forward pass.

    Node i is a tuple (parents, backward_fn); children always have larger
    indices than their parents, so a single reverse sweep visits each node
    exactly once.
    """

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a tape is already recording")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def __len__(self):
        return len(self.nodes)


def active_tape():
    return _ACTIVE_TAPE


class DifferentiableArray:
    """n-dimensional float64 array participating in reverse-mode autodiff."""

    __slots__ = ("values", "grad", "node_id", "requires_grad")

    def __init__(self, values, requires_grad=False):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.node_id = -1
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    def gradient(self):
        """Gradient buffer, lazily allocated as zeros if never written."""
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        return self.grad

    def item(self):
        return float(self.values)

    def __repr__(self):
        return f"DifferentiableArray(shape={self.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; everything routes through the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, DifferentiableArray):
            raise TypeError("division only supported by scalars")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def variable(values, requires_grad=True):
    """Wrap external data as a leaf; rejects NaN/Inf at the boundary."""
    arr = np.asarray(values, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise NonFiniteInput("leaf array contains NaN or Inf")
    return DifferentiableArray(arr, requires_grad=requires_grad)


def constant(values):
    """Non-differentiable leaf (positional tables, input data, ...)."""
    return variable(values, requires_grad=False)


@dataclass
class Parameter:
    """Named trainable leaf; names are unique within a model."""

    array: DifferentiableArray
    name: str
    trainable: bool = True


def _coerce(x):
    if isinstance(x, DifferentiableArray):
        return x
    return DifferentiableArray(np.asarray(x, dtype=np.float64))


def _make(values, parents, backward_fn):
    out = DifferentiableArray(values)
    tape = _ACTIVE_TAPE
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node_id = len(tape.nodes)
        tape.nodes.append((parents, backward_fn))
    return out


def _unbroadcast(g, shape):
    """Reduce gradient g down to `shape` by summing broadcast axes."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(tape, loss):
    """Accumulate d(loss)/d(leaf) into every requires-grad leaf.

    Gradients add onto any existing leaf .grad so sub-batches can accumulate;
    callers zero grads between optimizer steps.
    """
    if not isinstance(loss, DifferentiableArray):
        raise TypeError("loss must be a DifferentiableArray")
    if loss.size != 1:
        raise NonScalarLoss(f"loss has shape {loss.shape}; expected a scalar")
    buf = [None] * len(tape.nodes)
    seed = np.ones_like(loss.values)
    if loss.node_id >= 0:
        buf[loss.node_id] = seed
    elif loss.requires_grad:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    else:
        return
    for nid in range(len(tape.nodes) - 1, -1, -1):
        g = buf[nid]
        if g is None:
            continue
        parents, backward_fn = tape.nodes[nid]
        for parent, pg in zip(parents, backward_fn(g)):
            if pg is None:
                continue
            if parent.node_id >= 0:
                if buf[parent.node_id] is None:
                    buf[parent.node_id] = pg
                else:
                    buf[parent.node_id] = buf[parent.node_id] + pg
            elif parent.requires_grad:
                if parent.grad is None:
                    parent.grad = pg.copy()
                else:
                    parent.grad += pg
        buf[nid] = None


# ---------------------------------------------------------------------------
# Primitive suite
# ---------------------------------------------------------------------------

def add(a, b):
    a = _coerce(a)
    b = _coerce(b)
    out = a.values + b.values
    ash, bsh = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, ash), _unbroadcast(g, bsh)

    return _make(out, (a, b), bw)


def sub(a, b):
    a = _coerce(a)
    b = _coerce(b)
    out = a.values - b.values
    ash, bsh = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, ash), _unbroadcast(-g, bsh)

    return _make(out, (a, b), bw)


def mul(a, b):
    a = _coerce(a)
    b = _coerce(b)
    av, bv = a.values, b.values
    ash, bsh = a.shape, b.shape
    need_a, need_b = a.requires_grad, b.requires_grad

    def bw(g):
        ga = _unbroadcast(g * bv, ash) if need_a else None
        gb = _unbroadcast(g * av, bsh) if need_b else None
        return ga, gb

    return _make(av * bv, (a, b), bw)


def matmul(a, b):
    a = _coerce(a)
    b = _coerce(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    av, bv = a.values, b.values
    ash, bsh = a.shape, b.shape
    need_a, need_b = a.requires_grad, b.requires_grad

    def bw(g):
        ga = _unbroadcast(g @ bv.swapaxes(-1, -2), ash) if need_a else None
        gb = _unbroadcast(av.swapaxes(-1, -2) @ g, bsh) if need_b else None
        return ga, gb

    return _make(av @ bv, (a, b), bw)


def transpose(a, axes=None):
    a = _coerce(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inv),)

    return _make(a.values.transpose(axes), (a,), bw)


def reshape(a, shape):
    a = _coerce(a)
    orig = a.shape

    def bw(g):
        return (g.reshape(orig),)

    return _make(a.values.reshape(shape), (a,), bw)


def slice_(a, key):
    a = _coerce(a)

    def bw(g):
        full = np.zeros(a.shape)
        full[key] = g
        return (full,)

    return _make(a.values[key], (a,), bw)


def concat(arrays, axis=0):
    arrays = [_coerce(x) for x in arrays]
    sizes = [x.shape[axis] for x in arrays]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([x.values for x in arrays], axis=axis), tuple(arrays), bw)


def take_rows(a, indices):
    """Select rows of a 2-D array. Indices must be unique (MoE dispatch)."""
    a = _coerce(a)
    if a.ndim != 2:
        raise ShapeMismatch(f"take_rows expects a 2-D array, got {a.shape}")
    idx = np.asarray(indices, dtype=np.intp)

    def bw(g):
        full = np.zeros(a.shape)
        full[idx] = g
        return (full,)

    return _make(a.values[idx], (a,), bw)


def scatter_rows(rows, indices, total_rows):
    """Place rows of a 2-D array at unique indices of a zero-padded result."""
    rows = _coerce(rows)
    if rows.ndim != 2:
        raise ShapeMismatch(f"scatter_rows expects a 2-D array, got {rows.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    out = np.zeros((total_rows, rows.shape[1]))
    out[idx] = rows.values

    def bw(g):
        return (g[idx],)

    return _make(out, (rows,), bw)


def softmax_lastdim(a):
    a = _coerce(a)
    y = a.values - a.values.max(axis=-1, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)

    def bw(g):
        # einsum keeps the large g*y temporary off the heap
        dot = np.einsum("...i,...i->...", g, y)[..., None]
        gx = g - dot
        gx *= y
        return (gx,)

    return _make(y, (a,), bw)


def rmsnorm(x, gain, eps=1e-6):
    """x / sqrt(mean(x^2) + eps) * gain, normalizing over the last axis."""
    x = _coerce(x)
    gain = _coerce(gain)
    n = x.shape[-1]
    r = np.sqrt((x.values ** 2).mean(axis=-1, keepdims=True) + eps)
    xn = x.values / r
    y = xn * gain.values
    xv, gv = x.values, gain.values
    gsh = gain.shape

    def bw(g):
        gg = g * gv
        gx = gg / r - xv * ((gg * xv).sum(axis=-1, keepdims=True) / (n * r ** 3))
        ggain = _unbroadcast(g * xn, gsh)
        return gx, ggain

    return _make(y, (x, gain), bw)


def gelu(a):
    a = _coerce(a)
    av = a.values
    cdf = 0.5 * (1.0 + erf(av * _SQRT_HALF))
    y = av * cdf

    def bw(g):
        pdf = np.exp(-0.5 * av * av) * _INV_SQRT_2PI
        return (g * (cdf + av * pdf),)

    return _make(y, (a,), bw)


def tanh(a):
    a = _coerce(a)
    y = np.tanh(a.values)

    def bw(g):
        return (g * (1.0 - y * y),)

    return _make(y, (a,), bw)


def mean(a, axis=None):
    a = _coerce(a)
    y = a.values.mean(axis=axis)
    count = a.size if axis is None else a.shape[axis]
    sh = a.shape

    def bw(g):
        if axis is None:
            return (np.full(sh, float(g) / count),)
        return (np.expand_dims(g, axis).repeat(sh[axis], axis=axis) / count,)

    return _make(y, (a,), bw)


def sum_(a, axis=None):
    a = _coerce(a)
    y = a.values.sum(axis=axis)
    sh = a.shape

    def bw(g):
        if axis is None:
            return (np.full(sh, float(g)),)
        return (np.expand_dims(g, axis).repeat(sh[axis], axis=axis),)

    return _make(y, (a,), bw)


def sum_of_squares(a):
    a = _coerce(a)
    av = a.values

    def bw(g):
        return (2.0 * float(g) * av,)

    return _make(np.asarray((av ** 2).sum()), (a,), bw)


def record_op(values, parents, backward_fn):
    """Register a custom op (used by the quantizer's gradient bridge)."""
    return _make(values, tuple(parents), backward_fn)


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------

@dataclass
class FiniteDifferenceReport:
    max_relative_error: float
    passed: bool
    checked_coordinates: int
    note: str = ""


def finite_difference_check(fn, params, step=1e-5, tolerance=1e-6,
                            max_coords_per_param=None, rng=None):
    """Compare backward() against central differences of a scalar function.

    `fn` must rebuild its graph from the current parameter values on every
    call and be deterministic. For large tensors a random subset of
    coordinates is probed (`max_coords_per_param`).
    """
    if step <= 0:
        return FiniteDifferenceReport(math.inf, False, 0, "invalid step: must be > 0")
    if rng is None:
        rng = np.random.default_rng(0)
    for p in params:
        p.array.grad = None
    with Tape() as tape:
        loss = fn()
    if loss.size != 1:
        raise NonScalarLoss("finite_difference_check needs a scalar function")
    backward(tape, loss)
    analytic = {p.name: p.array.gradient().copy() for p in params}

    worst = 0.0
    checked = 0
    for p in params:
        flat = p.array.values.reshape(-1)
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        else:
            coords = range(n)
        an_flat = analytic[p.name].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(fn().values)
            flat[i] = orig - step
            f_minus = float(fn().values)
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            rel = abs(fd - an_flat[i]) / max(abs(fd), abs(an_flat[i]), 1e-8)
            if rel > worst:
                worst = rel
            checked += 1
    return FiniteDifferenceReport(worst, worst <= tolerance, checked)

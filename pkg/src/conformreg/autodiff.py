"""Minimal reverse-mode automatic differentiation on numpy arrays.

A Var wraps a float64 ndarray plus edges to the Vars it was computed
from; each edge carries a vector-Jacobian closure.  Calling backward()
on a scalar Var walks the graph once in reverse topological order and
accumulates gradients into every Var it reaches.  Plain ndarrays and
scalars mix freely with Vars and are treated as constants (no edge, no
gradient), so callers only pay for the derivatives they ask for.

The op set is deliberately small: elementwise arithmetic, sin/cos/sqrt,
constant powers, axis reductions, reshape/transpose, a last-axis matrix
product, masked selection, and the 3x3 determinant / cofactor needed by
the deformation energy.  Data-dependent branching goes through
where_mask with a precomputed boolean mask; guard singular inputs
(zero bases under fractional powers, zero denominators) on the masked-
off side with the same trick before taking the power, otherwise the
vjp of the dead branch turns into nan * 0 = nan.
"""

from __future__ import annotations

import numpy as np

from . import mat3


class Var:
    """Node in the differentiation graph."""

    __slots__ = ("value", "grad", "_parents")

    # keep numpy from absorbing Vars into object arrays; binary ops with
    # ndarrays must fall through to the __r*__ methods below
    __array_ufunc__ = None

    def __init__(self, value, parents=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = tuple(parents)

    @property
    def shape(self):
        return self.value.shape

    # -- graph traversal ------------------------------------------------

    def backward(self, seed=None):
        """Populate .grad with d(self)/d(node) over the reachable graph.

        seed defaults to ones, the usual choice for a scalar loss.  All
        grads in the reachable subgraph are reset first, so calling
        backward for several outputs of a shared graph in sequence
        yields each output's own gradient (read leaves between calls).
        """
        topo = []
        seen = {id(self)}
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            stack.append((node, True))
            for parent, _ in node._parents:
                if id(parent) not in seen:
                    seen.add(id(parent))
                    stack.append((parent, False))

        for node in topo:
            node.grad = None
        if seed is None:
            seed = np.ones_like(self.value)
        self.grad = np.asarray(seed, dtype=np.float64)

        for node in reversed(topo):
            g = node.grad
            if g is None:
                continue
            for parent, vjp in node._parents:
                contrib = vjp(g)
                if parent.grad is None:
                    parent.grad = contrib
                else:
                    parent.grad = parent.grad + contrib

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, n):
        return powc(self, n)


def value_of(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def zero_grads(vars_):
    for v in vars_:
        v.grad = None


def _unbroadcast(g, shape):
    """Sum g down to `shape` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _edges(pairs):
    """Keep only the (operand, vjp) pairs whose operand is a Var."""
    return tuple((x, f) for x, f in pairs if isinstance(x, Var))


# -- elementwise --------------------------------------------------------


def add(a, b):
    av, bv = value_of(a), value_of(b)
    return Var(av + bv, _edges([
        (a, lambda g: _unbroadcast(g, av.shape)),
        (b, lambda g: _unbroadcast(g, bv.shape)),
    ]))


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    return Var(av - bv, _edges([
        (a, lambda g: _unbroadcast(g, av.shape)),
        (b, lambda g: _unbroadcast(-g, bv.shape)),
    ]))


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    return Var(av * bv, _edges([
        (a, lambda g: _unbroadcast(g * bv, av.shape)),
        (b, lambda g: _unbroadcast(g * av, bv.shape)),
    ]))


def div(a, b):
    av, bv = value_of(a), value_of(b)
    out = av / bv
    return Var(out, _edges([
        (a, lambda g: _unbroadcast(g / bv, av.shape)),
        (b, lambda g: _unbroadcast(-g * out / bv, bv.shape)),
    ]))


def powc(x, n):
    """x ** n for a constant exponent n."""
    xv = value_of(x)
    n = float(n)
    return Var(xv**n, _edges([(x, lambda g: g * (n * xv ** (n - 1.0)))]))


def sin(x):
    xv = value_of(x)
    return Var(np.sin(xv), _edges([(x, lambda g: g * np.cos(xv))]))


def cos(x):
    xv = value_of(x)
    return Var(np.cos(xv), _edges([(x, lambda g: -g * np.sin(xv))]))


def sqrt(x):
    xv = value_of(x)
    out = np.sqrt(xv)
    return Var(out, _edges([(x, lambda g: g * (0.5 / out))]))


def where_mask(mask, a, b):
    """Select a where mask else b; mask is a constant boolean array."""
    mask = np.asarray(mask, dtype=bool)
    av, bv = value_of(a), value_of(b)
    return Var(np.where(mask, av, bv), _edges([
        (a, lambda g: _unbroadcast(np.where(mask, g, 0.0), av.shape)),
        (b, lambda g: _unbroadcast(np.where(mask, 0.0, g), bv.shape)),
    ]))


# -- reductions, shaping ------------------------------------------------


def vsum(x, axis=None, keepdims=False):
    xv = value_of(x)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, xv.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, xv.shape).copy()

    return Var(xv.sum(axis=axis, keepdims=keepdims), _edges([(x, vjp)]))


def vmean(x, axis=None, keepdims=False):
    xv = value_of(x)
    count = xv.size if axis is None else np.prod(
        [xv.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(vsum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reshape(x, shape):
    xv = value_of(x)
    return Var(xv.reshape(shape), _edges([(x, lambda g: g.reshape(xv.shape))]))


def transpose(x, axes):
    xv = value_of(x)
    inv = tuple(np.argsort(axes))
    return Var(xv.transpose(axes), _edges([(x, lambda g: g.transpose(inv))]))


def dot_last(a, w):
    """a @ w contracting the last axis of a: (..., k) x (k, m) -> (..., m)."""
    av, wv = value_of(a), value_of(w)
    nbatch = av.ndim - 1

    def vjp_w(g):
        return np.tensordot(av, g, axes=(tuple(range(nbatch)), tuple(range(nbatch))))

    return Var(np.matmul(av, wv), _edges([
        (a, lambda g: np.matmul(g, wv.T)),
        (w, vjp_w),
    ]))


# -- 3x3 algebra ---------------------------------------------------------


def det3(x):
    """Determinant over trailing (3, 3) axes; vjp is the cofactor."""
    xv = value_of(x)
    return Var(mat3.det3(xv), _edges([
        (x, lambda g: g[..., None, None] * mat3.cof3(xv)),
    ]))


def cof3(x):
    """Cofactor matrix; the derivative map is e -> cross3(x, e), which is
    self-adjoint, so the vjp reuses it on the upstream gradient."""
    xv = value_of(x)
    return Var(mat3.cof3(xv), _edges([
        (x, lambda g: mat3.cross3(xv, g)),
    ]))


def frob2(x):
    """Squared Frobenius norm over the trailing two axes."""
    return vsum(mul(x, x), axis=(-2, -1))

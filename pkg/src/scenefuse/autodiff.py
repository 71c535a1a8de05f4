"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every differentiable value is a :class:`Var` holding a float64 ndarray.
Ops accept a mix of Vars, ndarrays and Python scalars; a Var is produced
only when at least one input is a Var, so the same numeric code serves
both the gradient path (training losses) and the raw fast path
(sampling, rendering) without tape overhead on the latter.

The graph is a DAG of Vars; :func:`backward` runs a topological sweep
accumulating vector-Jacobian products into ``Var.grad``.
"""

import numpy as np

from . import _kernels as K


class Var:
    """A node in the reverse-mode tape."""

    __slots__ = ("value", "grad", "_parents", "_vjp")

    def __init__(self, value, parents=(), vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    def item(self):
        return float(self.value)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, leaf={self._vjp is None})"

    # operator sugar; full implementations live at module level
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, key):
        return getitem(self, key)


def is_var(x):
    return isinstance(x, Var)


def value_of(x):
    if isinstance(x, Var):
        return x.value
    if isinstance(x, np.ndarray):
        return x
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverses numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _node(value, links):
    """Build a Var from (input, vjp) links; passthrough if no Var inputs.

    `links` is a sequence of (maybe_var, fn) where fn maps the output
    cotangent to this input's cotangent. Links whose input is not a Var
    are dropped.
    """
    live = [(v, fn) for v, fn in links if isinstance(v, Var)]
    if not live:
        return value
    parents = tuple(v for v, _ in live)
    fns = tuple(fn for _, fn in live)

    def vjp(g):
        return tuple(fn(g) for fn in fns)

    return Var(value, parents, vjp)


def backward(root, seed=None):
    """Accumulate gradients of `root` into every reachable Var's .grad.

    `root` must be scalar unless an explicit `seed` cotangent is given.
    Existing .grad values on leaves are overwritten, not accumulated.
    """
    if not isinstance(root, Var):
        raise TypeError("backward() needs a Var root")
    if seed is None:
        if root.value.shape != ():
            raise ValueError("backward() without seed requires a scalar root")
        seed = np.asarray(1.0)

    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    for node in order:
        node.grad = None
    root.grad = np.asarray(seed, dtype=np.float64)

    for node in reversed(order):
        if node.grad is None or node._vjp is None:
            continue
        for parent, g in zip(node._parents, node._vjp(node.grad)):
            if parent.grad is None:
                parent.grad = np.array(g, dtype=np.float64, copy=True)
            else:
                parent.grad = parent.grad + g


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting supported)

def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    return _node(out, [(a, lambda g: _unbroadcast(g, av.shape)),
                       (b, lambda g: _unbroadcast(g, bv.shape))])


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    out = av - bv
    return _node(out, [(a, lambda g: _unbroadcast(g, av.shape)),
                       (b, lambda g: _unbroadcast(-g, bv.shape))])


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av * bv
    return _node(out, [(a, lambda g: _unbroadcast(g * bv, av.shape)),
                       (b, lambda g: _unbroadcast(g * av, bv.shape))])


def div(a, b):
    av, bv = value_of(a), value_of(b)
    out = av / bv
    return _node(out, [(a, lambda g: _unbroadcast(g / bv, av.shape)),
                       (b, lambda g: _unbroadcast(-g * av / (bv * bv), bv.shape))])


def square(a):
    av = value_of(a)
    return _node(av * av, [(a, lambda g: 2.0 * g * av)])


def sqrt(a):
    av = value_of(a)
    out = np.sqrt(av)

    def vjp(g):
        # finite subgradient at 0 (an exactly-zero embedding otherwise
        # turns inf * 0 into NaN inside cosine similarity)
        return g * (0.5 / np.maximum(out, 1e-150))

    return _node(out, [(a, vjp)])


def exp(a):
    av = value_of(a)
    out = np.exp(av)
    return _node(out, [(a, lambda g: g * out)])


def tanh(a):
    av = value_of(a)
    out = np.tanh(av)
    return _node(out, [(a, lambda g: g * (1.0 - out * out))])


def clamp(a, lo, hi):
    """Clip to [lo, hi]; gradient passes only inside the closed interval."""
    av = value_of(a)
    out = np.clip(av, lo, hi)
    mask = (av >= lo) & (av <= hi)
    return _node(out, [(a, lambda g: g * mask)])


def lincomb(ca, a, cb, b):
    """ca*a + cb*b with scalar constants; backed by the kernel backend."""
    av, bv = value_of(a), value_of(b)
    out = K.lincomb(float(ca), av, float(cb), bv)
    return _node(out, [(a, lambda g: ca * g), (b, lambda g: cb * g)])


# ---------------------------------------------------------------------------
# reductions and shape ops

def vsum(a, axis=None, keepdims=False):
    av = value_of(a)
    out = av.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, av.shape)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(g2, av.shape)

    return _node(out, [(a, vjp)])


def vmean(a, axis=None, keepdims=False):
    av = value_of(a)
    if axis is None:
        n = av.size
    elif isinstance(axis, tuple):
        n = int(np.prod([av.shape[i] for i in axis]))
    else:
        n = av.shape[axis]
    s = vsum(a, axis=axis, keepdims=keepdims)
    return mul(s, 1.0 / n)


def reshape(a, shape):
    av = value_of(a)
    return _node(av.reshape(shape), [(a, lambda g: g.reshape(av.shape))])


def concat(parts, axis=0):
    vals = [value_of(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)

    links = []
    for i, p in enumerate(parts):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g, lo=lo, hi=hi):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            return g[tuple(sl)]

        links.append((p, vjp))
    return _node(out, links)


def getitem(a, key):
    av = value_of(a)
    out = av[key]

    def vjp(g):
        full = np.zeros_like(av)
        np.add.at(full, key, g)
        return full

    return _node(out, [(a, vjp)])


def gather_rows(table, ids):
    """Select rows of a 2-D table; gradients scatter-add into the rows."""
    tv = value_of(table)
    idx = np.asarray(ids, dtype=np.int64)
    out = tv[idx]

    def vjp(g):
        full = np.zeros_like(tv)
        np.add.at(full, idx, g)
        return full

    return _node(out, [(table, vjp)])


def dot(a, b):
    av, bv = value_of(a), value_of(b)
    out = av @ bv
    return _node(out, [(a, lambda g: g * bv), (b, lambda g: g * av)])


def matvec(w, x):
    """(m,n) @ (n,) -> (m,)."""
    wv, xv = value_of(w), value_of(x)
    out = wv @ xv
    return _node(out, [(w, lambda g: np.outer(g, xv)),
                       (x, lambda g: wv.T @ g)])


def vecmat(x, w):
    """(n,) @ (n,m) -> (m,)."""
    xv, wv = value_of(x), value_of(w)
    out = xv @ wv
    return _node(out, [(x, lambda g: wv @ g),
                       (w, lambda g: np.outer(xv, g))])


def norm(a):
    return sqrt(vsum(square(a)))


def cosine(a, b, guard=1e-12):
    """dot(a,b) / (|a||b| + guard); safe at zero norms."""
    return div(dot(a, b), add(mul(norm(a), norm(b)), guard))


# ---------------------------------------------------------------------------
# fused MLP node

def mlp3(x, w1, b1, w2, b2, w3, b3):
    """Three dense layers with GELU between; one fused tape node.

    Forward and backward run in the selected kernel backend.
    """
    xv = value_of(x)
    vals = [value_of(p) for p in (w1, b1, w2, b2, w3, b3)]
    y, cache = K.mlp3_forward(xv, *vals)

    inputs = (x, w1, b1, w2, b2, w3, b3)
    if not any(isinstance(p, Var) for p in inputs):
        return y

    # the backward kernel yields all seven gradients at once; cache them so
    # the per-input vjp links share a single kernel call
    state = {}

    def grads_for(g):
        key = id(g)
        if state.get("key") != key:
            state["key"] = key
            state["grads"] = K.mlp3_backward(g, xv, vals[0], vals[2], vals[4], cache)
        return state["grads"]

    links = []
    for pos, p in enumerate(inputs):
        def vjp(g, pos=pos):
            return grads_for(g)[pos]
        links.append((p, vjp))
    return _node(y, links)

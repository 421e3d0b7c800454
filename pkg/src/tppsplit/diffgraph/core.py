"""Reverse-mode differentiation over dense float64 arrays.

Every primitive returns a new :class:`Node` carrying its forward value, its
parents and a vector-Jacobian product closure.  Node values are read-only once
created.  Gradients are never stored on nodes: :func:`grad` keeps them in a
local table, so the same forward graph can be differentiated more than once
(e.g. once for the time loss and once for the mark loss).
"""
import math

import numpy as np
from scipy import special

from ..errors import NonFiniteValue, ShapeMismatch

_SQRT_2PI = math.sqrt(2.0 * math.pi)
_SQRT2 = math.sqrt(2.0)


class Node:
    __slots__ = ("value", "parents", "op", "vjp", "param")

    def __init__(self, value, parents=(), op="const", vjp=None, param=None, owned=False):
        # external inputs are copied so freezing them never touches caller arrays
        value = np.asarray(value, dtype=np.float64) if owned else np.array(value, dtype=np.float64)
        value.flags.writeable = False
        self.value = value
        self.parents = parents
        self.op = op
        self.vjp = vjp
        self.param = param

    @property
    def shape(self):
        return self.value.shape

    @property
    def requires_grad(self):
        return self.param is not None or bool(self.parents)

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.shape})"

    def item(self):
        return float(self.value)

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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return index(self, key)


def as_node(x):
    return x if isinstance(x, Node) else Node(x)


def constant(x):
    return Node(x)


def _make(value, parents, op, vjp):
    value = np.asarray(value, dtype=np.float64)
    if not any(p.requires_grad for p in parents):
        return Node(value, op=op, owned=True)
    return Node(value, parents, op, vjp, owned=True)


def unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(*shapes):
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot broadcast shapes {shapes}") from exc


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_node(a), as_node(b)
    _check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, (a, b), "add",
                 lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_node(a), as_node(b)
    _check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.value - b.value, (a, b), "sub",
                 lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_node(a), as_node(b)
    _check_broadcast(a.shape, b.shape)
    av, bv = a.value, b.value
    return _make(av * bv, (a, b), "mul",
                 lambda g: (unbroadcast(g * bv, av.shape), unbroadcast(g * av, bv.shape)))


def div(a, b):
    a, b = as_node(a), as_node(b)
    _check_broadcast(a.shape, b.shape)
    av, bv = a.value, b.value
    out = av / bv
    return _make(out, (a, b), "div",
                 lambda g: (unbroadcast(g / bv, av.shape), unbroadcast(-g * out / bv, bv.shape)))


def neg(a):
    a = as_node(a)
    return _make(-a.value, (a,), "neg", lambda g: (-g,))


def _unary(a, value, dfn, op):
    a = as_node(a)
    return _make(value, (a,), op, lambda g: (g * dfn(),))


def exp(a):
    a = as_node(a)
    out = np.exp(a.value)
    return _unary(a, out, lambda: out, "exp")


def log(a):
    a = as_node(a)
    v = a.value
    with np.errstate(divide="ignore"):
        out = np.log(v)
    return _unary(a, out, lambda: 1.0 / v, "log")


def sqrt(a):
    a = as_node(a)
    out = np.sqrt(a.value)
    return _unary(a, out, lambda: 0.5 / out, "sqrt")


def square(a):
    a = as_node(a)
    v = a.value
    return _unary(a, v * v, lambda: 2.0 * v, "square")


def erf(a):
    a = as_node(a)
    v = a.value
    return _unary(a, special.erf(v), lambda: (2.0 / math.sqrt(math.pi)) * np.exp(-v * v), "erf")


def log_ndtr(a):
    """log of the standard normal CDF, stable in both tails."""
    a = as_node(a)
    v = a.value
    out = special.log_ndtr(v)
    return _unary(a, out, lambda: np.exp(-0.5 * v * v - out) / _SQRT_2PI, "log_ndtr")


def sigmoid(a):
    a = as_node(a)
    out = special.expit(a.value)
    return _unary(a, out, lambda: out * (1.0 - out), "sigmoid")


def tanh(a):
    a = as_node(a)
    out = np.tanh(a.value)
    return _unary(a, out, lambda: 1.0 - out * out, "tanh")


def softplus(a):
    a = as_node(a)
    v = a.value
    return _unary(a, np.logaddexp(0.0, v), lambda: special.expit(v), "softplus")


def relu(a):
    a = as_node(a)
    v = a.value
    return _unary(a, np.maximum(v, 0.0), lambda: (v > 0).astype(np.float64), "relu")


def gelu(a):
    """Exact GELU, x * Phi(x)."""
    a = as_node(a)
    v = a.value
    cdf = 0.5 * (1.0 + special.erf(v / _SQRT2))
    return _unary(a, v * cdf, lambda: cdf + v * np.exp(-0.5 * v * v) / _SQRT_2PI, "gelu")


def clip(a, lo, hi, counter=None):
    """Clamp to [lo, hi]; zero gradient outside.  ``counter`` (a dict) tallies clamps."""
    a = as_node(a)
    v = a.value
    inside = (v >= lo) & (v <= hi)
    if counter is not None:
        counter["clamped"] = counter.get("clamped", 0) + int(v.size - inside.sum())
    return _unary(a, np.clip(v, lo, hi), lambda: inside.astype(np.float64), "clip")


def _exprel_grad(x):
    # d/dx (e^x - 1)/x = (e^x (x - 1) + 1) / x^2
    small = np.abs(x) < 1e-3
    xs = np.where(small, 1.0, x)
    big = (np.exp(xs) * (xs - 1.0) + 1.0) / (xs * xs)
    series = 0.5 + x / 3.0 + x * x / 8.0 + x ** 3 / 30.0
    return np.where(small, series, big)


def exprel(a):
    """(e^x - 1)/x with the removable singularity at 0 filled in."""
    a = as_node(a)
    v = a.value
    return _unary(a, special.exprel(v), lambda: _exprel_grad(v), "exprel")


# ---------------------------------------------------------------- reductions


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    a = as_node(a)
    shape = a.shape
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(out, (a,), "sum", vjp)


def logsumexp(a, axis=-1):
    a = as_node(a)
    v = a.value
    m = np.max(v, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.sum(np.exp(v - m), axis=axis, keepdims=True)
    out_k = m + np.log(s)
    weights = np.exp(v - out_k)
    out = np.squeeze(out_k, axis=axis)
    return _make(out, (a,), "logsumexp", lambda g: (np.expand_dims(g, axis) * weights,))


def softmax(a, axis=-1):
    a = as_node(a)
    v = a.value
    e = np.exp(v - np.max(v, axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(out, (a,), "softmax", vjp)


def log_softmax(a, axis=-1):
    a = as_node(a)
    v = a.value
    shifted = v - np.max(v, axis=axis, keepdims=True)
    out = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    p = np.exp(out)
    return _make(out, (a,), "log_softmax",
                 lambda g: (g - p * np.sum(g, axis=axis, keepdims=True),))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    """2-D matrix product, or matrix-vector when ``b`` is 1-D."""
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim not in (1, 2) or av.shape[1] != bv.shape[0]:
        raise ShapeMismatch(f"matmul {av.shape} @ {bv.shape}")

    def vjp(g):
        if bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        return g @ bv.T, av.T @ g

    return _make(av @ bv, (a, b), "matmul", vjp)


def affine(x, w, b=None):
    """x @ w.T + b over the last axis of ``x``; ``w`` has shape (out, in)."""
    x, w = as_node(x), as_node(w)
    xv, wv = x.value, w.value
    if wv.ndim != 2 or xv.shape[-1] != wv.shape[1]:
        raise ShapeMismatch(f"affine input {xv.shape} vs weight {wv.shape}")
    out = xv @ wv.T
    parents = [x, w]
    if b is not None:
        b = as_node(b)
        if b.shape != (wv.shape[0],):
            raise ShapeMismatch(f"affine bias {b.shape} vs weight {wv.shape}")
        out = out + b.value
        parents.append(b)

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = xv.reshape(-1, xv.shape[-1])
        grads = [g @ wv, g2.T @ x2]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _make(out, tuple(parents), "affine", vjp)


# ---------------------------------------------------------------- shape ops


def concat(nodes, axis=-1):
    nodes = [as_node(n) for n in nodes]
    vals = [n.value for n in nodes]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _make(out, tuple(nodes), "concat", lambda g: tuple(np.split(g, sizes, axis=axis)))


def index(a, key):
    """Basic (slice) or integer-array indexing; gradient scatters back."""
    a = as_node(a)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, key, g)
        return (full,)

    return _make(a.value[key], (a,), "index", vjp)


def take_rows(a, idx):
    """Row gather ``a[idx]`` (embedding lookup)."""
    idx = np.asarray(idx, dtype=np.int64)
    return index(a, idx)


def reshape(a, shape):
    a = as_node(a)
    old = a.shape
    return _make(a.value.reshape(shape), (a,), "reshape", lambda g: (g.reshape(old),))


def where(cond, a, b):
    a, b = as_node(a), as_node(b)
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape
    return _make(np.where(cond, a.value, b.value), (a, b), "where",
                 lambda g: (unbroadcast(np.where(cond, g, 0.0), sa),
                            unbroadcast(np.where(cond, 0.0, g), sb)))


# ---------------------------------------------------------------- fused recurrent op


def gru_sequence(xproj, w_hh, b_hh, n_steps, batch):
    """Run a GRU over ``n_steps`` steps for ``batch`` sequences at once.

    ``xproj`` holds the input projections W_ih e + b_ih for every step, shape
    (n_steps * batch, 3H) in step-major order, gate order (reset, update, new).
    Returns all hidden states h_0 .. h_n stacked step-major, shape
    ((n_steps + 1) * batch, H), with h_0 = 0.  Backprop through time is done by
    hand in a single vjp.
    """
    xproj, w_hh, b_hh = as_node(xproj), as_node(w_hh), as_node(b_hh)
    wv, bv = w_hh.value, b_hh.value
    H = wv.shape[1]
    if wv.shape != (3 * H, H) or bv.shape != (3 * H,):
        raise ShapeMismatch(f"gru recurrent weights {wv.shape}, bias {bv.shape}")
    X = xproj.value.reshape(n_steps, batch, 3 * H)
    hs = np.zeros((n_steps + 1, batch, H))
    rs = np.empty((n_steps, batch, H))
    zs = np.empty_like(rs)
    ns = np.empty_like(rs)
    ans = np.empty_like(rs)
    for t in range(n_steps):
        h = hs[t]
        a = h @ wv.T + bv
        r = special.expit(X[t, :, :H] + a[:, :H])
        z = special.expit(X[t, :, H:2 * H] + a[:, H:2 * H])
        an = a[:, 2 * H:]
        n = np.tanh(X[t, :, 2 * H:] + r * an)
        hs[t + 1] = (1.0 - z) * n + z * h
        rs[t], zs[t], ns[t], ans[t] = r, z, n, an

    def vjp(g):
        G = g.reshape(n_steps + 1, batch, H)
        dX = np.empty((n_steps, batch, 3 * H))
        dW = np.zeros_like(wv)
        db = np.zeros_like(bv)
        carry = np.zeros((batch, H))
        for t in range(n_steps - 1, -1, -1):
            dh = G[t + 1] + carry
            r, z, n, an, hp = rs[t], zs[t], ns[t], ans[t], hs[t]
            dn_pre = dh * (1.0 - z) * (1.0 - n * n)
            dz_pre = dh * (hp - n) * z * (1.0 - z)
            dr_pre = dn_pre * an * r * (1.0 - r)
            dA = np.concatenate([dr_pre, dz_pre, dn_pre * r], axis=1)
            dX[t, :, :H] = dr_pre
            dX[t, :, H:2 * H] = dz_pre
            dX[t, :, 2 * H:] = dn_pre
            dW += dA.T @ hp
            db += dA.sum(axis=0)
            carry = dh * z + dA @ wv
        return dX.reshape(n_steps * batch, 3 * H), dW, db

    return _make(hs.reshape((n_steps + 1) * batch, H), (xproj, w_hh, b_hh), "gru_sequence", vjp)


# ---------------------------------------------------------------- backward


class Tape:
    """Topologically ordered records of one forward evaluation, root last."""

    def __init__(self, records):
        self.records = records

    @classmethod
    def trace(cls, root):
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self):
        return len(self.records)


def grad(loss, tape=None):
    """Gradients of scalar ``loss`` w.r.t. every parameter leaf, keyed by block name.

    Leaves for the same block that appear several times are summed.
    """
    if loss.value.size != 1:
        raise ShapeMismatch(f"loss must be scalar, got shape {loss.shape}")
    if not np.all(np.isfinite(loss.value)):
        raise NonFiniteValue("loss is not finite")
    tape = tape or Tape.trace(loss)
    grads = {id(loss): np.ones_like(loss.value)}
    out = {}
    for node in reversed(tape.records):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.param is not None:
            out[node.param] = out[node.param] + g if node.param in out else np.array(g, dtype=np.float64)
        if node.vjp is None:
            continue
        pgrads = node.vjp(g)
        for p, pg in zip(node.parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return out

"""Dense-array reverse-mode automatic differentiation.

A :class:`DiffArray` wraps a numpy array and records the operations applied
to it. Calling :meth:`DiffArray.backward` on a scalar output replays the
recorded tape in reverse topological order and accumulates gradients into
``.grad`` of every participating array.

The primitive set is closed and enumerated here; composite operations
(layer norm, losses, attention) are built by composing these primitives so
that every backward rule in the repo stays individually checkable with
:func:`grad_check`.

Broadcasting is deliberately restricted to scalar and trailing-axis
broadcast; anything else must be an explicit reshape.
"""

import numpy as np

from .validation import ContractViolation

_grad_enabled = [True]


class no_grad:
    """Context manager that disables tape recording (inference mode)."""

    def __enter__(self):
        self._prev = _grad_enabled[0]
        _grad_enabled[0] = False
        return self

    def __exit__(self, *exc):
        _grad_enabled[0] = self._prev
        return False


class DiffArray:
    """A dense real-valued array participating in reverse-mode AD."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.array(data, dtype=dtype if dtype is not None else np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return self.data.item()

    def detach(self):
        return DiffArray(self.data.copy(), dtype=self.data.dtype)

    def backward(self):
        if self.data.size != 1:
            raise ContractViolation("backward() requires a scalar output")
        tape = Tape.from_output(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(tape.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                pg = pg.astype(parent.data.dtype, copy=False)
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    def zero_grad(self):
        self.grad = None

    # operator sugar; all routed through the primitives below
    def __add__(self, other):
        return add(self, _lift(other, self.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _lift(other, self.dtype))

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, _lift(other, self.dtype))

    def __rsub__(self, other):
        return sub(_lift(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _lift(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_lift(other, self.dtype), self)

    def __neg__(self):
        return mul(self, _lift(-1.0, self.dtype))

    def __pow__(self, n):
        if not isinstance(n, int) or n < 1:
            raise ContractViolation("only positive integer powers are supported")
        out = self
        for _ in range(n - 1):
            out = mul(out, self)
        return out

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def __repr__(self):
        return f"DiffArray(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Topologically ordered record of the graph reaching one output."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_output(cls, output):
        order = []
        visited = set()
        stack = [(output, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)


def _lift(x, dtype):
    if isinstance(x, DiffArray):
        return x
    return DiffArray(np.asarray(x, dtype=dtype))


def asdiff(x, requires_grad=False, dtype=None):
    if isinstance(x, DiffArray):
        return x
    return DiffArray(x, requires_grad=requires_grad, dtype=dtype)


def _check_broadcast(sa, sb):
    """Allow equal shapes, scalar broadcast, or suffix (trailing-axis) broadcast."""
    if sa == sb:
        return
    if len(sa) == 0 or len(sb) == 0:
        return
    if len(sa) == len(sb) and all(x == y or x == 1 or y == 1 for x, y in zip(sa, sb)):
        return
    short, long_ = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if long_[len(long_) - len(short):] == short:
        return
    raise ContractViolation(
        f"broadcast of {sa} with {sb} not allowed; use an explicit reshape"
    )


def _unbroadcast(g, shape):
    """Reduce a broadcasted gradient back to the original shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g.reshape(shape)


def _node(data, parents, backward):
    out = DiffArray(data, dtype=data.dtype)
    if _grad_enabled[0] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# binary elementwise primitives

def add(a, b):
    _check_broadcast(a.shape, b.shape)
    data = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(data, (a, b), backward)


def sub(a, b):
    _check_broadcast(a.shape, b.shape)
    data = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(data, (a, b), backward)


def mul(a, b):
    _check_broadcast(a.shape, b.shape)
    data = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(data, (a, b), backward)


def div(a, b):
    _check_broadcast(a.shape, b.shape)
    data = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _node(data, (a, b), backward)


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ContractViolation("matmul expects two 2-d arrays")
    if a.shape[1] != b.shape[0]:
        raise ContractViolation(f"matmul shapes {a.shape} x {b.shape} incompatible")
    data = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _node(data, (a, b), backward)


# ---------------------------------------------------------------------------
# unary elementwise primitives

def exp(a):
    data = np.exp(a.data)

    def backward(g):
        return (g * data,)

    return _node(data, (a,), backward)


def ln(a):
    with np.errstate(invalid="ignore", divide="ignore"):
        data = np.log(a.data)

    def backward(g):
        return (g / a.data,)

    return _node(data, (a,), backward)


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(a):
    data = _sigmoid(np.atleast_1d(a.data)).reshape(a.shape)

    def backward(g):
        return (g * data * (1.0 - data),)

    return _node(data, (a,), backward)


def softplus(a):
    """ln(1 + e^v), stable for large |v| via max(v, 0) + log1p(e^{-|v|})."""
    if not isinstance(a, DiffArray):
        v = np.asarray(a, dtype=np.float64)
        return np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))
    v = a.data
    data = np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))

    def backward(g):
        return (g * _sigmoid(np.atleast_1d(v)).reshape(v.shape),)

    return _node(data, (a,), backward)


def silu(a):
    s = _sigmoid(np.atleast_1d(a.data)).reshape(a.shape)
    data = a.data * s

    def backward(g):
        return (g * (s + a.data * s * (1.0 - s)),)

    return _node(data, (a,), backward)


def absolute(a):
    """|v| with the subgradient sign(v); sign(0) taken as 0."""
    data = np.abs(a.data)

    def backward(g):
        return (g * np.sign(a.data),)

    return _node(data, (a,), backward)


# ---------------------------------------------------------------------------
# reductions

def _expand_reduced(g, shape, axis):
    if axis is None:
        return np.asarray(g)
    return np.expand_dims(g, axis)


def sum_(a, axis=None, keepdims=False):
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = _expand_reduced(g, a.shape, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(data), (a,), backward)


def mean(a, axis=None, keepdims=False):
    n = a.size if axis is None else a.shape[axis]
    data = a.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = _expand_reduced(g, a.shape, axis)
        return (np.broadcast_to(g, a.shape) / n,)

    return _node(np.asarray(data), (a,), backward)


def variance(a, axis=None, keepdims=False):
    """Population (biased) variance over one axis or the whole array."""
    n = a.size if axis is None else a.shape[axis]
    m = a.data.mean(axis=axis, keepdims=True)
    centered = a.data - m
    data = (centered * centered).mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = _expand_reduced(g, a.shape, axis)
        return (np.broadcast_to(g, a.shape) * 2.0 * centered / n,)

    return _node(np.asarray(data), (a,), backward)


# ---------------------------------------------------------------------------
# structural primitives

def reshape(a, shape):
    data = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return _node(data, (a,), backward)


def transpose(a):
    if a.ndim != 2:
        raise ContractViolation("transpose expects a 2-d array")
    data = a.data.T.copy()

    def backward(g):
        return (g.T,)

    return _node(data, (a,), backward)


def getitem(a, key):
    data = np.asarray(a.data[key])

    def backward(g):
        z = np.zeros_like(a.data)
        np.add.at(z, key, g)
        return (z,)

    return _node(data.copy(), (a,), backward)


def concat(arrays, axis=0):
    arrays = list(arrays)
    data = np.concatenate([a.data for a in arrays], axis=axis)
    splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(data, arrays, backward)


def take(a, indices):
    """Gather rows along axis 0 (the interleave permutation primitive)."""
    idx = np.asarray(indices, dtype=np.intp)
    data = a.data[idx]

    def backward(g):
        z = np.zeros_like(a.data)
        np.add.at(z, idx, g)
        return (z,)

    return _node(data, (a,), backward)


def conv1d_depthwise(x, w):
    """Causal depthwise 1-d convolution.

    x: (T, C) token sequence, w: (K, C) per-channel kernel. Output (T, C)
    with left zero padding so y[t] sees x[t-K+1 .. t] only.
    """
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ContractViolation(f"conv1d_depthwise shapes {x.shape}, {w.shape} incompatible")
    t_len, channels = x.shape
    k = w.shape[0]
    xp = np.concatenate([np.zeros((k - 1, channels), dtype=x.dtype), x.data], axis=0)
    data = np.zeros((t_len, channels), dtype=x.dtype)
    for j in range(k):
        data += w.data[j] * xp[j:j + t_len]

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for j in range(k):
            gxp[j:j + t_len] += g * w.data[j]
            gw[j] = (g * xp[j:j + t_len]).sum(axis=0)
        return gxp[k - 1:], gw

    return _node(data, (x, w), backward)


# ---------------------------------------------------------------------------
# composites

def sqrt_(a):
    """Elementwise square root of a strictly positive array (via exp/ln)."""
    return exp(mul(ln(a), _lift(0.5, a.dtype)))


def layer_norm(x, gain, bias, eps=1e-5):
    """Zero-mean unit-variance normalization over the last axis, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ContractViolation("layer_norm gain/bias must match the last extent")
    m = mean(x, axis=x.ndim - 1, keepdims=True)
    v = variance(x, axis=x.ndim - 1, keepdims=True)
    inv = exp(mul(ln(add(v, _lift(eps, x.dtype))), _lift(-0.5, x.dtype)))
    return add(mul(mul(sub(x, m), inv), gain), bias)


def grad_check(f, x, h=1e-4):
    """Compare reverse-mode gradients of a scalar function against central
    differences, returning the max relative error over coordinates.

    Non-finite f(x) is reported as failure (inf).
    """
    x = asdiff(x, dtype=np.float64)
    probe = DiffArray(x.data.copy(), requires_grad=True)
    out = f(probe)
    if not np.isfinite(out.data).all():
        return np.inf
    out.backward()
    analytic = probe.grad.reshape(-1)

    flat = x.data.reshape(-1).copy()
    numeric = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(DiffArray(flat.reshape(x.shape))).data)
            flat[i] = orig - h
            fm = float(f(DiffArray(flat.reshape(x.shape))).data)
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * h)
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))

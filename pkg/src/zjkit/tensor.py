"""Dense float64 tensors with reverse-mode automatic differentiation.

Values are immutable after creation; every op that touches a tensor with
``requires_grad`` records the local backward rule so that :func:`backward`
can replay the graph in reverse topological order. Non-finite values are
rejected at creation time, which makes divergence surface as an error at
the op that produced it instead of poisoning downstream results.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from .errors import (
    DetachedRoot,
    NonFiniteValue,
    NotScalar,
    ShapeMismatch,
)

_GELU_C = math.sqrt(2.0 / math.pi)
_uid_counter = itertools.count()


class Tensor:
    """Immutable dense array node of the autodiff graph."""

    __slots__ = ("data", "requires_grad", "uid", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValue("tensor contains NaN or Inf")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.uid = next(_uid_counter)
        self._parents = tuple(_parents)
        self._backward = _backward

    # -- basics ---------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        if self.data.size != 1:
            raise NotScalar(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def tolist(self):
        return self.data.tolist()

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph plumbing -------------------------------------------------

    def _make(self, data, parents, backward):
        """Wrap an op result; drops the tape when no parent needs grad."""
        parents = tuple(p for p in parents if isinstance(p, Tensor))
        track = any(p.requires_grad or p._parents for p in parents)
        if not track:
            return Tensor(data)
        out = Tensor(data, _parents=parents, _backward=backward)
        return out

    # -- elementwise ----------------------------------------------------

    def _binary(self, other, fwd, bwd_self, bwd_other):
        if isinstance(other, (int, float)):
            other = Tensor(np.float64(other))
        if not isinstance(other, Tensor):
            raise TypeError(f"unsupported operand {type(other)!r}")
        a, b = self.data, other.data
        if a.shape != b.shape and a.size != 1 and b.size != 1:
            raise ShapeMismatch(f"operand shapes {a.shape} vs {b.shape}")
        out_data = fwd(a, b)

        def backward(grad, acc):
            ga = bwd_self(grad, a, b)
            gb = bwd_other(grad, a, b)
            acc(self, _unbroadcast(ga, a.shape))
            acc(other, _unbroadcast(gb, b.shape))

        return self._make(out_data, (self, other), backward)

    def __add__(self, other):
        return self._binary(other, np.add, lambda g, a, b: g, lambda g, a, b: g)

    __radd__ = __add__

    def __sub__(self, other):
        return self._binary(other, np.subtract, lambda g, a, b: g, lambda g, a, b: -g)

    def __rsub__(self, other):
        return Tensor(np.float64(other)) - self

    def __mul__(self, other):
        return self._binary(
            other, np.multiply, lambda g, a, b: g * b, lambda g, a, b: g * a
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self._binary(
            other,
            np.divide,
            lambda g, a, b: g / b,
            lambda g, a, b: -g * a / (b * b),
        )

    def __neg__(self):
        return self.scale(-1.0)

    def scale(self, s):
        s = float(s)

        def backward(grad, acc):
            acc(self, grad * s)

        return self._make(self.data * s, (self,), backward)

    def relu(self):
        mask = self.data > 0

        def backward(grad, acc):
            acc(self, grad * mask)

        return self._make(np.where(mask, self.data, 0.0), (self,), backward)

    def gelu(self):
        # tanh approximation; kept fixed so cross-run diffs stay tiny
        x = self.data
        inner = _GELU_C * (x + 0.044715 * x**3)
        t = np.tanh(inner)
        out = 0.5 * x * (1.0 + t)
        # d/dx [0.5 x (1 + tanh(u))], u = c (x + 0.044715 x^3)
        du = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du

        def backward(grad, acc):
            acc(self, grad * deriv)

        return self._make(out, (self,), backward)

    def tanh(self):
        t = np.tanh(self.data)

        def backward(grad, acc):
            acc(self, grad * (1.0 - t**2))

        return self._make(t, (self,), backward)

    def exp(self):
        e = np.exp(self.data)

        def backward(grad, acc):
            acc(self, grad * e)

        return self._make(e, (self,), backward)

    def log(self):
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.log(self.data)
        x = self.data

        def backward(grad, acc):
            acc(self, grad / x)

        return self._make(out, (self,), backward)

    def sqrt(self):
        r = np.sqrt(self.data)

        def backward(grad, acc):
            acc(self, grad * 0.5 / r)

        return self._make(r, (self,), backward)

    def square(self):
        x = self.data

        def backward(grad, acc):
            acc(self, grad * 2.0 * x)

        return self._make(x * x, (self,), backward)

    def abs(self):
        s = np.sign(self.data)

        def backward(grad, acc):
            acc(self, grad * s)

        return self._make(np.abs(self.data), (self,), backward)

    # -- reductions and shape -------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = self.data.sum(axis=axis, keepdims=keepdims)
        shape = self.shape

        def backward(grad, acc):
            g = np.asarray(grad)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            acc(self, np.broadcast_to(g, shape))

        return self._make(out, (self,), backward)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            n = self.size
        else:
            n = self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims).scale(1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        if int(np.prod(shape)) != self.size:
            raise ShapeMismatch(f"cannot reshape {self.shape} to {shape}")
        old = self.shape

        def backward(grad, acc):
            acc(self, np.asarray(grad).reshape(old))

        return self._make(self.data.reshape(shape), (self,), backward)

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)

        def backward(grad, acc):
            acc(self, np.transpose(grad, inv))

        return self._make(np.transpose(self.data, axes), (self,), backward)

    @property
    def T(self):
        return self.transpose()

    def expand(self, shape):
        shape = tuple(shape)
        try:
            out = np.broadcast_to(self.data, shape)
        except ValueError as exc:
            raise ShapeMismatch(str(exc)) from None
        src = self.shape

        def backward(grad, acc):
            g = np.asarray(grad)
            # sum over prepended axes, then over axes broadcast from 1
            extra = g.ndim - len(src)
            if extra:
                g = g.sum(axis=tuple(range(extra)))
            keep = tuple(i for i, d in enumerate(src) if d == 1 and g.shape[i] != 1)
            if keep:
                g = g.sum(axis=keep, keepdims=True)
            acc(self, g)

        return self._make(np.ascontiguousarray(out), (self,), backward)

    def __getitem__(self, key):
        out = self.data[key]
        shape = self.shape

        def backward(grad, acc):
            g = np.zeros(shape)
            g[key] += grad  # basic indexing only, no duplicate targets
            acc(self, g)

        return self._make(out, (self,), backward)

    # -- matmul ---------------------------------------------------------

    def matmul(self, other):
        return matmul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


# -- construction -------------------------------------------------------


def tensor_new(shape, values, requires_grad=False):
    """Build a tensor from an explicit flat value list."""
    shape = tuple(int(d) for d in shape)
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if int(np.prod(shape)) != values.size:
        raise ShapeMismatch(
            f"shape {shape} implies {int(np.prod(shape))} values, got {values.size}"
        )
    return Tensor(values.reshape(shape), requires_grad=requires_grad)


def constant(data):
    return Tensor(data)


def _unbroadcast(grad, shape):
    g = np.asarray(grad, dtype=np.float64)
    if g.shape == shape:
        return g
    return np.full(shape, g.sum()) if int(np.prod(shape)) == 1 else g.sum().reshape(shape)


# -- free-function ops --------------------------------------------------

_EW_UNARY = {
    "relu": Tensor.relu,
    "gelu": Tensor.gelu,
    "exp": Tensor.exp,
    "log": Tensor.log,
    "square": Tensor.square,
}

_EW_BINARY = {
    "add": Tensor.__add__,
    "sub": Tensor.__sub__,
    "mul": Tensor.__mul__,
}


def ew_op(kind, a, b=None):
    """Elementwise op dispatcher over the documented kind set."""
    if kind in _EW_UNARY:
        return _EW_UNARY[kind](a)
    if kind == "scale":
        return a.scale(b)
    if kind in _EW_BINARY:
        return _EW_BINARY[kind](a, b)
    raise ValueError(f"unknown elementwise op {kind!r}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; batched when both operands share leading dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch("matmul requires >= 2-D operands")
    if a.ndim != b.ndim and not (a.ndim == 2 or b.ndim == 2):
        raise ShapeMismatch(f"rank mismatch {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"inner dims {a.shape} @ {b.shape}")
    if a.ndim == b.ndim and a.shape[:-2] != b.shape[:-2]:
        raise ShapeMismatch(f"batch dims {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(grad, acc):
        g = np.asarray(grad)
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        # when one operand is 2-D against a batched one, reduce batch dims
        if ga.ndim > a.ndim:
            ga = ga.sum(axis=tuple(range(ga.ndim - a.ndim)))
        if gb.ndim > b.ndim:
            gb = gb.sum(axis=tuple(range(gb.ndim - b.ndim)))
        acc(a, ga)
        acc(b, gb)

    return a._make(out, (a, b), backward)


def softmax(x: Tensor, temperature=1.0) -> Tensor:
    """Row-stabilized softmax along the last axis at the given temperature."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = x.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    if not np.all(np.isfinite(y)):
        raise NonFiniteValue("softmax overflow")

    def backward(grad, acc):
        g = np.asarray(grad)
        dot = (g * y).sum(axis=-1, keepdims=True)
        acc(x, (g - dot) * y / temperature)

    return x._make(y, (x,), backward)


def log_softmax(x: Tensor, temperature=1.0) -> Tensor:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = x.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    y = np.exp(out)

    def backward(grad, acc):
        g = np.asarray(grad)
        acc(x, (g - y * g.sum(axis=-1, keepdims=True)) / temperature)

    return x._make(out, (x,), backward)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps=1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch(
            f"gamma/beta must be [{d}], got {gamma.shape} / {beta.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gamma.data * xhat + beta.data

    def backward(grad, acc):
        g = np.asarray(grad)
        gg = g * gamma.data
        acc(gamma, (g * xhat).sum(axis=tuple(range(g.ndim - 1))))
        acc(beta, g.sum(axis=tuple(range(g.ndim - 1))))
        m1 = gg.mean(axis=-1, keepdims=True)
        m2 = (gg * xhat).mean(axis=-1, keepdims=True)
        acc(x, (gg - m1 - xhat * m2) * inv)

    return x._make(out, (x, gamma, beta), backward)


def concat(tensors, axis=0):
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(grad, acc):
        g = np.asarray(grad)
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            acc(t, g[tuple(idx)])

    return tensors[0]._make(out, tensors, backward)


def custom_op(inputs, value, grads):
    """Graph node with a hand-written backward rule.

    ``grads[i]`` maps the upstream gradient to the gradient of ``inputs[i]``.
    Used for spectra (SVD / power iteration) where singular vectors are
    treated as locally constant.
    """
    inputs = tuple(inputs)

    def backward(grad, acc):
        for t, fn in zip(inputs, grads):
            if fn is not None:
                acc(t, fn(np.asarray(grad)))

    return inputs[0]._make(value, inputs, backward)


# -- reverse pass -------------------------------------------------------


def backward(root: Tensor):
    """Run reverse-mode accumulation from a scalar root.

    Returns a map ``leaf uid -> gradient Tensor`` over all reachable
    leaves with ``requires_grad``.
    """
    if root.size != 1:
        raise NotScalar(f"backward root has shape {root.shape}")
    if not root._parents and not root.requires_grad:
        raise DetachedRoot("root is not recorded on any tape")

    topo = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if node.uid in seen:
            continue
        seen.add(node.uid)
        stack.append((node, True))
        for p in node._parents:
            if p.uid not in seen:
                stack.append((p, False))

    grads = {root.uid: np.ones(root.shape)}

    def acc(t, g):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != t.shape:
            g = g.reshape(t.shape)
        if t.uid in grads:
            grads[t.uid] = grads[t.uid] + g
        else:
            grads[t.uid] = g

    for node in reversed(topo):
        g = grads.get(node.uid)
        if g is None or node._backward is None:
            continue
        node._backward(g, acc)

    out = {}
    for node in topo:
        if node.requires_grad and not node._parents and node.uid in grads:
            out[node.uid] = Tensor(grads[node.uid])
    return out


def grad(root: Tensor, leaves):
    """Convenience wrapper: gradients for an explicit leaf list."""
    gmap = backward(root)
    zero = lambda t: Tensor(np.zeros(t.shape))
    return [gmap.get(t.uid, zero(t)) for t in leaves]

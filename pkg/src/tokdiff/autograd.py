"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps a float64 ndarray plus the closure that propagates
its output gradient to its parents; ``backward`` on a scalar walks the tape
in reverse topological order and accumulates ``.grad`` on every node.  The
op set is exactly what a small transformer and its training objective need:
elementwise arithmetic with numpy broadcasting, 2-D matmul/transpose, exp,
log, tanh, power, axis sums, row gathers, column/row slices and a scalar
floor.  Softmax, log-softmax and layer norm are composites of those
primitives, so their gradients need no special casing.

Functions accept plain ndarrays or scalars wherever a constant (no-grad)
operand makes sense; the mirrored module-level helpers (``exp``, ``log``,
``matmul``, ...) dispatch on type so numerical code can run identically on
ndarrays and on Tensors.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("value", "grad", "_parents", "_backward")

    def __init__(self, value, parents=(), backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    # operator sugar; non-Tensor operands are constants
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _val(x):
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _accum(t, g):
    if isinstance(t, Tensor):
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def backward(out: Tensor) -> None:
    """Accumulate gradients of a scalar Tensor into every node of its tape."""
    if out.value.size != 1:
        raise ValueError("backward requires a scalar output")
    order, seen, stack = [], set(), [(out, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not isinstance(node, Tensor):
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    out.grad = np.ones_like(out.value)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# Primitives (each works on Tensor or constant operands)
# ---------------------------------------------------------------------------

def add(a, b):
    av, bv = _val(a), _val(b)
    if not (isinstance(a, Tensor) or isinstance(b, Tensor)):
        return av + bv
    out = Tensor(av + bv, parents=(a, b))
    out._backward = lambda g: (_accum(a, _unbroadcast(g, av.shape)),
                               _accum(b, _unbroadcast(g, bv.shape)))
    return out


def mul(a, b):
    av, bv = _val(a), _val(b)
    if not (isinstance(a, Tensor) or isinstance(b, Tensor)):
        return av * bv
    out = Tensor(av * bv, parents=(a, b))
    out._backward = lambda g: (_accum(a, _unbroadcast(g * bv, av.shape)),
                               _accum(b, _unbroadcast(g * av, bv.shape)))
    return out


def div(a, b):
    av, bv = _val(a), _val(b)
    if not (isinstance(a, Tensor) or isinstance(b, Tensor)):
        return av / bv
    out = Tensor(av / bv, parents=(a, b))
    out._backward = lambda g: (_accum(a, _unbroadcast(g / bv, av.shape)),
                               _accum(b, _unbroadcast(-g * av / (bv * bv), bv.shape)))
    return out


def matmul(a, b):
    av, bv = _val(a), _val(b)
    if not (isinstance(a, Tensor) or isinstance(b, Tensor)):
        return av @ bv
    out = Tensor(av @ bv, parents=(a, b))
    out._backward = lambda g: (_accum(a, g @ bv.T), _accum(b, av.T @ g))
    return out


def transpose(a):
    if not isinstance(a, Tensor):
        return _val(a).T
    out = Tensor(a.value.T, parents=(a,))
    out._backward = lambda g: _accum(a, g.T)
    return out


def exp(a):
    if not isinstance(a, Tensor):
        return np.exp(_val(a))
    ev = np.exp(a.value)
    out = Tensor(ev, parents=(a,))
    out._backward = lambda g: _accum(a, g * ev)
    return out


def log(a):
    if not isinstance(a, Tensor):
        return np.log(_val(a))
    out = Tensor(np.log(a.value), parents=(a,))
    out._backward = lambda g: _accum(a, g / a.value)
    return out


def tanh(a):
    if not isinstance(a, Tensor):
        return np.tanh(_val(a))
    tv = np.tanh(a.value)
    out = Tensor(tv, parents=(a,))
    out._backward = lambda g: _accum(a, g * (1.0 - tv * tv))
    return out


def power(a, p: float):
    """a**p for constant exponent p."""
    if not isinstance(a, Tensor):
        return _val(a) ** p
    out = Tensor(a.value ** p, parents=(a,))
    out._backward = lambda g: _accum(a, g * p * a.value ** (p - 1.0))
    return out


def sum_(a, axis=None, keepdims=False):
    if not isinstance(a, Tensor):
        return np.sum(_val(a), axis=axis, keepdims=keepdims)
    out = Tensor(np.sum(a.value, axis=axis, keepdims=keepdims), parents=(a,))

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.value.shape).copy())

    out._backward = back
    return out


def mean_(a, axis=None, keepdims=False):
    n = _val(a).shape[axis] if axis is not None else _val(a).size
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def take_rows(a, idx):
    """Rows idx of a 2-D operand; gradient scatter-adds back (idx may repeat)."""
    idx = np.asarray(idx, dtype=np.int64)
    if not isinstance(a, Tensor):
        return _val(a)[idx]
    out = Tensor(a.value[idx], parents=(a,))

    def back(g):
        ga = np.zeros_like(a.value)
        np.add.at(ga, idx, g)
        _accum(a, ga)

    out._backward = back
    return out


def slice_cols(a, lo: int, hi: int):
    if not isinstance(a, Tensor):
        return _val(a)[:, lo:hi]
    out = Tensor(a.value[:, lo:hi], parents=(a,))

    def back(g):
        ga = np.zeros_like(a.value)
        ga[:, lo:hi] = g
        _accum(a, ga)

    out._backward = back
    return out


def slice_rows(a, lo: int, hi: int):
    if not isinstance(a, Tensor):
        return _val(a)[lo:hi]
    out = Tensor(a.value[lo:hi], parents=(a,))

    def back(g):
        ga = np.zeros_like(a.value)
        ga[lo:hi] = g
        _accum(a, ga)

    out._backward = back
    return out


def maximum_scalar(a, c: float):
    """Elementwise max(a, c); gradient is zero where the floor is active."""
    if not isinstance(a, Tensor):
        return np.maximum(_val(a), c)
    mask = a.value > c
    out = Tensor(np.where(mask, a.value, c), parents=(a,))
    out._backward = lambda g: _accum(a, g * mask)
    return out


def reshape(a, shape):
    if not isinstance(a, Tensor):
        return _val(a).reshape(shape)
    out = Tensor(a.value.reshape(shape), parents=(a,))
    out._backward = lambda g: _accum(a, g.reshape(a.value.shape))
    return out


# ---------------------------------------------------------------------------
# Composites
# ---------------------------------------------------------------------------

def softmax_rows(z):
    """Row-wise softmax with max subtraction (detached, gradient-neutral)."""
    m = _val(z).max(axis=-1, keepdims=True)
    e = exp(add(z, -m))
    return div(e, sum_(e, axis=-1, keepdims=True))


def log_softmax_rows(z):
    m = _val(z).max(axis=-1, keepdims=True)
    zm = add(z, -m)
    return add(zm, mul(log(sum_(exp(zm), axis=-1, keepdims=True)), -1.0))


def layer_norm_rows(x, eps: float = 1e-5):
    """Row-wise (x - mean) / sqrt(var + eps); no learned affine here."""
    mu = mean_(x, axis=-1, keepdims=True)
    xc = add(x, mul(mu, -1.0))
    var = mean_(mul(xc, xc), axis=-1, keepdims=True)
    return div(xc, power(add(var, eps), 0.5))


def gelu(x):
    """Smooth tanh-form gelu; smoothness keeps finite-difference checks tight."""
    c = 0.7978845608028654  # sqrt(2/pi)
    inner = mul(add(x, mul(power(x, 3.0), 0.044715)), c)
    return mul(mul(x, add(tanh(inner), 1.0)), 0.5)


def numerical_gradient(f, param: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Central finite differences of scalar f() w.r.t. a parameter array.

    Perturbs entries of ``param`` in place (restoring them), so ``f`` must
    read the same array object.
    """
    g = np.zeros_like(param)
    flat = param.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f()
        flat[i] = orig - eps
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return g

"""A small tape-based reverse-mode differentiation engine over numpy arrays.

Only the operations the editable LM, the hyper-network and the monolithic
reference need are provided. Graphs are freed after ``backward`` unless
``retain_graph=True``; intermediate gradients are kept only for tensors
marked with :meth:`Tensor.retain_grad`.
"""
import contextlib

import numpy as np

from . import memory

_grad_enabled = [True]


@contextlib.contextmanager
def no_grad():
    _grad_enabled.append(False)
    try:
        yield
    finally:
        _grad_enabled.pop()


def is_grad_enabled():
    return _grad_enabled[-1]


class Tensor:
    __slots__ = (
        "data", "grad", "requires_grad", "_parents", "_backward", "_acct", "_retain",
        "__weakref__",
    )
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, *, charge=True):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._retain = False
        self._acct = memory.register(self, self.data.nbytes) if charge else memory.register(self, 0)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def retain_grad(self):
        self._retain = True
        return self

    def detach(self):
        return Tensor(self.data)

    def item(self):
        return float(self.data)

    def backward(self, grad=None, retain_graph=False):
        backward(self, grad, retain_graph=retain_graph)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True).reshape(self.data.shape)
            if self._acct is not None:
                self._acct.add(self.grad.nbytes)
        else:
            self.grad += g

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __getitem__ = lambda self, key: getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x, charge=False)


def _result(data, parents, backward_fn):
    req = _grad_enabled[-1] and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    if req:
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def backward(root, grad=None, retain_graph=False):
    """Propagate gradients from ``root`` to every tensor it depends on."""
    if not root.requires_grad:
        raise RuntimeError("backward() on a tensor that does not require grad")
    if grad is None:
        if root.data.size != 1:
            raise RuntimeError("grad must be given for non-scalar roots")
        grad = np.ones_like(root.data)
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    meter = memory.active()
    pending = {id(root): np.asarray(grad, dtype=root.data.dtype)}
    if meter is not None:
        meter.allocate(pending[id(root)].nbytes)
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None or node._retain:
            node._accumulate(g)
        if node._backward is not None:
            pgrads = node._backward(g)
            for p, pg in zip(node._parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                pg = _unbroadcast(np.asarray(pg), p.data.shape)
                key = id(p)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg
                    if meter is not None:
                        meter.allocate(pg.nbytes)
            if not retain_graph:
                node._parents = ()
                node._backward = None
        if meter is not None:
            meter.release(g.nbytes)


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _result(ad / bd, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)))


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,))


def exp(a):
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a):
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a):
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a):
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a):
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def bwd(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result(out, (a,), bwd)


ACTIVATIONS = {"relu": relu, "tanh": tanh, "gelu": gelu}


def activation(name):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None


# ---------------------------------------------------------------- structural

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2:
        raise ValueError("matmul expects 2-D operands")

    def bwd(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return _result(ad @ bd, (a, b), bwd)


def transpose(a):
    return _result(a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape):
    old = a.data.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def tsum(a, axis=None, keepdims=False):
    shape = a.data.shape

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bwd)


def tmean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else a.data.shape[axis]
    return tsum(a, axis, keepdims) * (1.0 / n)


def getitem(a, key):
    shape = a.data.shape
    dtype = a.data.dtype

    def bwd(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, key, g)
        return (full,)

    return _result(a.data[key], (a,), bwd)


def pick(a, idx):
    """``a[i, idx[i]]`` for a 2-D tensor."""
    rows = np.arange(a.data.shape[0])
    return getitem(a, (rows, np.asarray(idx)))


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd)


def log_softmax(a, axis=-1):
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return _result(out, (a,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


def causal_mix(a):
    """Average each position with the running mean of positions up to it.

    ``a`` has shape (batch, time, features); position ``t`` becomes
    ``(a_t + mean(a_0..a_t)) / 2``.
    """
    x = a.data
    counts = np.arange(1, x.shape[1] + 1, dtype=x.dtype)[None, :, None]
    out = 0.5 * (x + np.cumsum(x, axis=1) / counts)

    def bwd(g):
        scaled = g / counts
        rev = np.flip(np.cumsum(np.flip(scaled, axis=1), axis=1), axis=1)
        return (0.5 * (g + rev),)

    return _result(out, (a,), bwd)


def solve_right(b, a):
    """``X = b @ inv(a)`` for a square ``a``; differentiable in both."""
    b, a = as_tensor(b), as_tensor(a)
    x = np.linalg.solve(a.data.T, b.data.T).T

    def bwd(g):
        gb = np.linalg.solve(a.data, g.T).T  # g @ inv(a).T
        ga = -x.T @ gb if a.requires_grad else None
        return (gb, ga)

    return _result(x, (b, a), bwd)

"""Reverse-mode automatic differentiation over float64 numpy arrays."""
from __future__ import annotations

import contextlib

import numpy as np
from scipy.special import expit

_grad_enabled = True


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


class GraphError(RuntimeError):
    """Misuse of the computation graph (stale graph, non-scalar loss, ...)."""


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(values, op):
    if not np.isfinite(values).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "name", "_parents", "_backward", "_op", "_released")
    # make numpy defer to Tensor's reflected operators
    __array_ufunc__ = None

    def __init__(self, values, requires_grad=False, name=None):
        values = np.array(values, dtype=np.float64)
        _check_finite(values, "Tensor()")
        self.values = values
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._released = False

    # -- construction of graph nodes ------------------------------------
    @classmethod
    def _node(cls, values, parents, backward, op):
        _check_finite(values, op)
        out = cls.__new__(cls)
        out.values = values
        out.grad = None
        out.name = None
        out._released = False
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        out._op = op
        return out

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    def item(self):
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else self.values

    def numpy(self):
        return self.values

    def detach(self):
        return Tensor(self.values)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def backward(self):
        backward(self)

    # -- arithmetic -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topo_order(root):
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
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    Interior nodes are released afterwards; calling backward again on the
    same graph raises :class:`GraphError`.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._released:
        raise GraphError("graph already consumed by a previous backward; re-run the forward pass")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor requiring grad")
    order = _topo_order(loss)
    for node in order:
        if node._released:
            raise GraphError("graph already consumed by a previous backward; re-run the forward pass")
    grads = {id(loss): np.ones_like(loss.values)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is not None:
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg
        node._backward = None
        node._parents = ()
        node._released = True


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return (_unbroadcast(g, sa) if a.requires_grad else None,
                _unbroadcast(g, sb) if b.requires_grad else None)

    return Tensor._node(a.values + b.values, (a, b), bw, "add")


def neg(a):
    return Tensor._node(-a.values, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values

    def bw(g):
        return (_unbroadcast(g * bv, av.shape) if a.requires_grad else None,
                _unbroadcast(g * av, bv.shape) if b.requires_grad else None)

    return Tensor._node(av * bv, (a, b), bw, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values

    def bw(g):
        return (_unbroadcast(g / bv, av.shape) if a.requires_grad else None,
                _unbroadcast(-g * av / (bv * bv), bv.shape) if b.requires_grad else None)

    return Tensor._node(av / bv, (a, b), bw, "div")


def power(a, p):
    if isinstance(p, Tensor):
        raise TypeError("only scalar exponents are supported")
    p = float(p)
    av = a.values
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.power(av, p)

    def bw(g):
        if p == 0.0:
            return (np.zeros_like(av),)
        with np.errstate(divide="ignore", invalid="ignore"):
            d = p * np.power(av, p - 1.0)
        return (g * np.where(np.isfinite(d), d, 0.0),)

    return Tensor._node(out, (a,), bw, "pow")


def exp(a):
    out = np.exp(a.values)
    return Tensor._node(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    av = a.values
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(av)
    return Tensor._node(out, (a,), lambda g: (g / av,), "log")


def clip(a, lo, hi):
    """Clamp; the gradient is passed through only strictly inside the range."""
    av = a.values
    inside = (av > lo) & (av < hi)
    return Tensor._node(np.clip(av, lo, hi), (a,), lambda g: (g * inside,), "clip")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._node(np.asarray(a.values.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    old = a.shape
    return Tensor._node(a.values.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def flatten(a):
    """[N, ...] -> [N, prod(...)] in row-major (x-fastest) order."""
    return reshape(a, (a.shape[0], -1))


def transpose(a, axes=None):
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._node(a.values.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return Tensor._node(np.concatenate([t.values for t in tensors], axis=axis), tensors,
                        lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")


def getitem(a, idx):
    shape = a.shape
    fancy = any(isinstance(i, (np.ndarray, list)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def bw(g):
        gx = np.zeros(shape)
        if fancy:
            np.add.at(gx, idx, g)
        else:
            gx[idx] += g
        return (gx,)

    return Tensor._node(np.array(a.values[idx]), (a,), bw, "getitem")


def take(a, indices, axis=0):
    """Gather along ``axis`` with an integer index array (repeats allowed)."""
    indices = np.asarray(indices)
    shape = a.shape
    out = np.take(a.values, indices, axis=axis)

    def bw(g):
        gx = np.zeros(shape)
        gm = np.moveaxis(gx, axis, 0)
        gg = np.moveaxis(g, tuple(range(axis, axis + indices.ndim)), tuple(range(indices.ndim)))
        np.add.at(gm, indices, gg)
        return (gx,)

    return Tensor._node(out, (a,), bw, "take")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    return Tensor._node(av @ bv, (a, b), bw, "matmul")


def dense(x, w, b=None):
    """x [N, Fin] @ w [Fin, Fout] + b [Fout]."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"dense: input features {x.shape[-1]} != weight rows {w.shape[0]}")
    y = matmul(x, w)
    return y if b is None else add(y, b)


def global_avg_pool(x):
    """[N, C, D, H, W] -> [N, C, 1, 1, 1]."""
    return mean(x, axis=(2, 3, 4), keepdims=True)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(x):
    xv = x.values
    return Tensor._node(np.maximum(xv, 0.0), (x,), lambda g: (g * (xv > 0),), "relu")


def leaky_relu(x, slope=0.2):
    xv = x.values
    scale = np.where(xv > 0, 1.0, slope)
    return Tensor._node(xv * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def sigmoid(x):
    s = expit(x.values)
    return Tensor._node(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def _check_axis(x, axis):
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"invalid axis {axis} for tensor of rank {x.ndim}")


def softmax(x, axis=-1):
    _check_axis(x, axis)
    z = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._node(s, (x,), bw, "softmax")


def log_softmax(x, axis=-1):
    _check_axis(x, axis)
    z = x.values - x.values.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return Tensor._node(out, (x,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),), "log_softmax")


def activation(kind, x, **kw):
    """Dispatch by name: relu, leaky_relu(slope), sigmoid, softmax(axis)."""
    fns = {"relu": relu, "leaky_relu": leaky_relu, "sigmoid": sigmoid, "softmax": softmax}
    if kind not in fns:
        raise ValueError(f"unknown activation {kind!r}")
    return fns[kind](x, **kw)


def dropout(x, rate, rng, training=True):
    """Inverted dropout; identity outside training or at rate 0."""
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return Tensor._node(x.values * keep, (x,), lambda g: (g * keep,), "dropout")


def instance_norm(x, eps=1e-5):
    """Per-sample, per-channel standardisation over the spatial axes of
    [N, C, ...]; no learned scale or shift."""
    if x.ndim < 3:
        raise ValueError(f"instance_norm needs [N, C, ...], got shape {x.shape}")
    axes = tuple(range(2, x.ndim))
    mu = x.values.mean(axis=axes, keepdims=True)
    xc = x.values - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axes, keepdims=True) + eps)
    xh = xc * inv

    def bw(g):
        gm = g.mean(axis=axes, keepdims=True)
        gx = (g * xh).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - xh * gx),)

    return Tensor._node(xh, (x,), bw, "instance_norm")

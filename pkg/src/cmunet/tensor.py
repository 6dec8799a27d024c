"""Dense tensor with reverse-mode automatic differentiation.

Values are contiguous row-major numpy arrays in float32 (training default)
or float64 (gradient checking). Every operation returns a fresh Tensor;
tensors produced by ops are treated as immutable. When any input of an op
requires gradients, the output records its parents and a backward closure;
``Tensor.backward()`` runs the closures in reverse topological order.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError

REAL32 = np.float32
REAL64 = np.float64
_REAL_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_grad_enabled = True
_deterministic = False
_rng = np.random.default_rng(0)


def set_seed(seed):
    """Reseed the global generator used for parameter initialization."""
    global _rng
    _rng = np.random.default_rng(seed)


def default_rng():
    return _rng


def set_deterministic(flag):
    """Force fixed reduction order / fixed scan tree in all kernels."""
    global _deterministic
    _deterministic = bool(flag)


def deterministic():
    return _deterministic


class no_grad:
    """Context manager disabling graph construction."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled():
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _REAL_DTYPES:
            arr = arr.astype(REAL32)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- basic introspection -------------------------------------------------

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    # -- autodiff ------------------------------------------------------------

    def backward(self, grad=None):
        """Reverse accumulation from this tensor into every reachable leaf.

        Repeated calls accumulate into existing ``grad`` buffers until they
        are cleared. The graph may be deep (sequential scans), so traversal
        is iterative.
        """
        if grad is None:
            if self.data.size != 1:
                raise ContractError("backward() needs a scalar or an explicit seed gradient")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise DimensionError("seed gradient shape mismatch")

        topo = _toposort(self)
        grads = {id(self): grad}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and node._backward is None:
                # leaf: accumulate into the persistent buffer
                node.grad = g if node.grad is None else node.grad + g
                continue
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            if node.grad is None and node.requires_grad:
                node.grad = g

    # operator sugar ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __pow__(self, p):
        return pow_scalar(self, p)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, *axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis, keepdims=False):
        return reduce_max(self, axis, keepdims)

    def select(self, axis, index):
        return select(self, axis, index)

    def exp(self):
        return exp(self)


class Parameter(Tensor):
    """Trainable leaf tensor. Name is assigned by the owning module registry."""

    __slots__ = ("name",)

    def __init__(self, data, dtype=None, name=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name


def _toposort(root):
    order = []
    seen = set()
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if isinstance(like, Tensor) else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward):
    """Assemble an op output; builds the graph only when gradients can flow."""
    req = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    if req:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise DimensionError(f"shapes {a.data.shape} and {b.data.shape} do not broadcast") from None


# -- elementwise -------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _check_broadcast(a, b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(out, (a, b), backward)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _check_broadcast(a, b)
    out = a.data * b.data

    def backward(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), backward)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _check_broadcast(a, b)
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _make(out, (a, b), backward)


def neg(a):
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a):
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    a = _as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def expm1(a):
    """exp(x) - 1 without cancellation near zero."""
    a = _as_tensor(a)
    out = np.expm1(a.data)
    return _make(out, (a,), lambda g: (g * (out + 1.0),))


def pow_scalar(a, p):
    a = _as_tensor(a)
    out = a.data ** p
    return _make(out, (a,), lambda g: (g * p * a.data ** (p - 1),))


def sqrt(a):
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


# -- reductions --------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.data.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _make(out, (a,), backward)


def reduce_mean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.data.ndim)
    count = int(np.prod([a.data.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.data.shape).copy() / count,)

    return _make(out, (a,), backward)


def reduce_max(a, axis, keepdims=False):
    """Max along one axis; gradient flows to the first maximal element."""
    a = _as_tensor(a)
    ax = axis % a.data.ndim
    out = a.data.max(axis=ax, keepdims=keepdims)
    arg = a.data.argmax(axis=ax)  # first occurrence on ties

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(arg, ax), g, axis=ax)
        return (ga,)

    return _make(out, (a,), backward)


# -- shape manipulation ------------------------------------------------------

def reshape(a, *shape):
    a = _as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = a.data.shape
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(old),))


def transpose(a, *axes):
    a = _as_tensor(a)
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    if not axes:
        axes = tuple(reversed(range(a.data.ndim)))
    inv = np.argsort(axes)
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _make(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def select(a, axis, index):
    """Pick one slice along ``axis`` (integer index, dimension removed)."""
    a = _as_tensor(a)
    ax = axis % a.data.ndim
    out = np.take(a.data, index, axis=ax)

    def backward(g):
        ga = np.zeros_like(a.data)
        sl = [slice(None)] * a.data.ndim
        sl[ax] = index
        ga[tuple(sl)] = g
        return (ga,)

    return _make(out, (a,), backward)


def stack(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(out, tuple(tensors), backward)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    ax = axis % tensors[0].data.ndim
    sizes = [t.data.shape[ax] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=ax))

    return _make(out, tuple(tensors), backward)


# -- gradient oracle ---------------------------------------------------------

def finite_diff_grad(f, x, h=1e-5):
    """Central-difference gradient of a scalar-valued ``f`` at ``x``.

    ``f`` takes a Tensor and returns a scalar Tensor or float. The probe
    dtype follows ``x``; use float64 inputs for meaningful checks.
    """
    if h <= 0:
        raise ContractError("finite_diff_grad needs h > 0")
    base = np.array(x.data, copy=True)
    grad = np.zeros_like(base)

    def evaluate(arr):
        y = f(Tensor(arr))
        return y.item() if isinstance(y, Tensor) else float(y)

    it = np.nditer(base, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        probe = base.copy()
        probe[idx] = base[idx] + h
        up = evaluate(probe)
        probe[idx] = base[idx] - h
        down = evaluate(probe)
        grad[idx] = (up - down) / (2.0 * h)
        it.iternext()
    return Tensor(grad)


def zeros(shape, dtype=REAL32):
    return Tensor(np.zeros(shape, dtype=dtype))


def ones(shape, dtype=REAL32):
    return Tensor(np.ones(shape, dtype=dtype))

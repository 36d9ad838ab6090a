"""Dense tensors with define-by-run reverse-mode differentiation.

Every op builds its output from numpy arrays and, when any input requires a
gradient, records a backward closure on the output. ``backward`` replays the
recorded graph in reverse topological order. The graph is rebuilt on every
forward pass, so node counts may change from one step to the next.

Precision is a run-level setting (``set_precision`` / ``precision``). Mixing
float32 and float64 tensors inside one graph raises ``PrecisionError``.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Tensor",
    "PrecisionError",
    "EmptyTapeError",
    "as_tensor",
    "backward",
    "build_tape",
    "concat",
    "gelu",
    "get_precision",
    "layer_norm",
    "lp_norm",
    "matmul",
    "no_grad",
    "precision",
    "scatter_mean",
    "gather_rows",
    "set_precision",
    "sigmoid",
    "silu",
    "softmax",
    "sparse_matmul",
]


class PrecisionError(TypeError):
    pass


class EmptyTapeError(RuntimeError):
    pass


_state = threading.local()
_PRECISION = {"dtype": np.dtype(np.float64), "debug": False}


def set_precision(dtype, debug=None):
    """Set the run-level float dtype (float32 or float64)."""
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise PrecisionError(f"unsupported precision {dtype}")
    _PRECISION["dtype"] = dtype
    if debug is not None:
        _PRECISION["debug"] = bool(debug)


def get_precision():
    return _PRECISION["dtype"]


@contextlib.contextmanager
def precision(dtype, debug=None):
    old = dict(_PRECISION)
    set_precision(dtype, debug)
    try:
        yield
    finally:
        _PRECISION.update(old)


def _grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    old = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


class Tensor:
    """An n-dimensional array that can take part in a gradient graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "name")
    __array_priority__ = 100
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        dtype = np.dtype(dtype) if dtype is not None else _PRECISION["dtype"]
        arr = np.asarray(data)
        if arr.dtype != dtype:
            arr = arr.astype(dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._op = None
        self.name = name

    # -- basic properties -------------------------------------------------
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

    @property
    def T(self):
        return self.transpose()

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.data.shape[0]

    def backward(self):
        backward(self)

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        return _add(self, other)

    def __radd__(self, other):
        return _add(self, other)

    def __sub__(self, other):
        return _add(self, -_lift(other, self))

    def __rsub__(self, other):
        return _add(_lift(other, self), -self)

    def __mul__(self, other):
        return _mul(self, other)

    def __rmul__(self, other):
        return _mul(self, other)

    def __truediv__(self, other):
        return _div(self, other)

    def __rtruediv__(self, other):
        return _div(_lift(other, self), self)

    def __neg__(self):
        return _make(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, p):
        if isinstance(p, Tensor):
            raise TypeError("only scalar exponents are supported")
        x = self.data
        return _make(x**p, (self,), lambda g: (g * p * x ** (p - 1),), "pow")

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(_lift(other, self), self)

    def __getitem__(self, idx):
        shape = self.data.shape
        fancy = _is_fancy(idx)

        def bw(g):
            gx = np.zeros(shape, dtype=g.dtype)
            if fancy:
                np.add.at(gx, idx, g)
            else:
                gx[idx] = g
            return (gx,)

        return _make(self.data[idx], (self,), bw, "getitem")

    # -- reductions and shape ops ----------------------------------------
    def sum(self, axis=None, keepdims=False):
        shape = self.data.shape

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return _make(self.data.sum(axis=axis, keepdims=keepdims), (self,), bw, "sum")

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod([self.data.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        return _make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),), "reshape")

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        return _make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),), "transpose")

    def swapaxes(self, a, b):
        return _make(self.data.swapaxes(a, b), (self,), lambda g: (g.swapaxes(a, b),), "swapaxes")

    # -- elementwise ------------------------------------------------------
    def exp(self):
        y = np.exp(self.data)
        return _make(y, (self,), lambda g: (g * y,), "exp")

    def log(self):
        x = self.data
        return _make(np.log(x), (self,), lambda g: (g / x,), "log")

    def sqrt(self):
        y = np.sqrt(self.data)
        return _make(y, (self,), lambda g: (g * 0.5 / y,), "sqrt")

    def tanh(self):
        y = np.tanh(self.data)
        return _make(y, (self,), lambda g: (g * (1.0 - y * y),), "tanh")

    def abs(self):
        x = self.data
        return _make(np.abs(x), (self,), lambda g: (g * np.sign(x),), "abs")

    def sigmoid(self):
        return sigmoid(self)


# ---------------------------------------------------------------------------
# graph plumbing


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _lift(x, like):
    """Wrap a constant operand in the dtype of ``like``."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=like.data.dtype)


def _check_dtypes(parents):
    dt = parents[0].data.dtype
    for p in parents[1:]:
        if p.data.dtype != dt:
            raise PrecisionError(f"mixed precision in one graph: {dt} vs {p.data.dtype}")


def _make(data, parents, backward_fn, op):
    if len(parents) > 1:
        _check_dtypes(parents)
    if _PRECISION["debug"] and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(p.data)) for p in parents):
            raise FloatingPointError(f"non-finite output from op {op!r}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _is_fancy(idx):
    if isinstance(idx, tuple):
        return any(isinstance(i, (list, np.ndarray)) for i in idx)
    return isinstance(idx, (list, np.ndarray))


def build_tape(loss):
    """Return every graph node reachable from ``loss`` in topological order."""
    order, seen = [], set()
    stack = [(loss, False)]
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


def backward(loss):
    """Populate ``.grad`` on every tensor that requires it and feeds ``loss``."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise EmptyTapeError("loss is not connected to any tensor that requires grad")
    tape = build_tape(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if g.shape != parent.data.shape:
                g = _unbroadcast(g, parent.data.shape)
            if parent.grad is None:
                parent.grad = np.array(g, dtype=parent.data.dtype, copy=True)
            else:
                parent.grad = parent.grad + g
        node._backward = None
        node._parents = ()
    return tape


# ---------------------------------------------------------------------------
# binary ops


def _add(a, b):
    b = _lift(b, a)
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def _mul(a, b):
    b = _lift(b, a)
    x, y = a.data, b.data
    return _make(x * y, (a, b), lambda g: (g * y, g * x), "mul")


def _div(a, b):
    b = _lift(b, a)
    x, y = a.data, b.data
    return _make(x / y, (a, b), lambda g: (g / y, -g * x / (y * y)), "div")


def _row_stable_matmul(x, y):
    # BLAS takes gemv-style paths for single rows and ragged column tiles, whose
    # rounding differs from the blocked kernel. Padding keeps each output row
    # a function of its own input row only.
    m, n = x.shape[-2], y.shape[-1]
    pad_cols = (-n) % 8
    if pad_cols:
        y = np.concatenate([y, np.zeros(y.shape[:-1] + (pad_cols,), dtype=y.dtype)], axis=-1)
    if m == 1:
        x = np.concatenate([x, np.zeros(x.shape[:-2] + (1, x.shape[-1]), dtype=x.dtype)], axis=-2)
    out = x @ y
    if pad_cols or m == 1:
        out = np.ascontiguousarray(out[..., :m, :n])
    return out


def matmul(a, b):
    """Matrix product with numpy batching semantics over leading axes."""
    a, b = as_tensor(a), _lift(b, as_tensor(a))
    x, y = a.data, b.data
    if x.ndim < 2 or y.ndim < 2 or x.shape[-1] != y.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {x.shape} @ {y.shape}")

    def bw(g):
        ga = g @ np.swapaxes(y, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(x, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _make(_row_stable_matmul(x, y), (a, b), bw, "matmul")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


# ---------------------------------------------------------------------------
# activations and normalization


def sigmoid(x):
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def silu(x):
    v = x.data
    s = 0.5 * (1.0 + np.tanh(0.5 * v))
    return _make(v * s, (x,), lambda g: (g * s * (1.0 + v * (1.0 - s)),), "silu")


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x):
    """tanh-approximated GELU."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v**3)
    th = np.tanh(inner)
    y = 0.5 * v * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * dinner),)

    return _make(y, (x,), bw, "gelu")


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw, "softmax")


def layer_norm(x, gamma=None, beta=None, eps=1e-5):
    """Normalize over the last axis; ``gamma``/``beta`` may be omitted."""
    d = x.data.shape[-1]
    if d < 2:
        raise ValueError(f"layer_norm over a single feature is degenerate (d={d})")
    v = x.data
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    parents = [x]
    y = xhat
    if gamma is not None:
        gamma = _lift(gamma, x)
        parents.append(gamma)
        y = y * gamma.data
    if beta is not None:
        beta = _lift(beta, x)
        parents.append(beta)
        y = y + beta.data

    def bw(g):
        gxhat = g * gamma.data if gamma is not None else g
        gx = rstd * (
            gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        out = [gx]
        lead = tuple(range(g.ndim - 1))
        if gamma is not None:
            out.append((g * xhat).sum(axis=lead))
        if beta is not None:
            out.append(g.sum(axis=lead))
        return tuple(out)

    return _make(y, tuple(parents), bw, "layer_norm")


def lp_norm(x, p=2, axis=-1):
    """Vector p-norm along ``axis`` with a zero subgradient at the origin."""
    if p < 1:
        raise ValueError("p must be >= 1")
    v = x.data
    a = np.abs(v)
    if p == 2:
        n = np.sqrt((v * v).sum(axis=axis))
    elif p == 1:
        n = a.sum(axis=axis)
    else:
        n = (a**p).sum(axis=axis) ** (1.0 / p)

    def bw(g):
        ne = np.expand_dims(n, axis)
        ge = np.expand_dims(g, axis)
        safe = np.where(ne > 0, ne, 1.0)
        if p == 1:
            d = np.sign(v)
        else:
            d = np.sign(v) * a ** (p - 1) / safe ** (p - 1)
        return (np.where(ne > 0, ge * d, 0.0),)

    return _make(n, (x,), bw, "lp_norm")


# ---------------------------------------------------------------------------
# sparse linear maps: gathers, scatters, interpolation


def sparse_matmul(m, x):
    """``m @ x`` for a constant scipy sparse ``m`` and a 2-D tensor ``x``."""
    x = as_tensor(x)
    m = sp.csr_matrix(m, dtype=x.data.dtype)
    if m.shape[1] != x.data.shape[0]:
        raise ValueError(f"sparse_matmul dimension mismatch: {m.shape} @ {x.shape}")
    mt = m.T.tocsr()
    return _make(np.asarray(m @ x.data), (x,), lambda g: (np.asarray(mt @ g),), "sparse_matmul")


def gather_rows(x, index):
    """Rows ``x[index]`` as a differentiable gather."""
    index = np.asarray(index, dtype=np.int64)
    n = x.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexError(f"gather index out of range for {n} rows")
    m = sp.csr_matrix((np.ones(index.size), (np.arange(index.size), index)), shape=(index.size, n))
    return sparse_matmul(m, x)


def scatter_mean(values, groups, n_groups):
    """Per-group mean of the rows of ``values``.

    Returns ``(means, empty)`` where ``empty`` flags groups with no rows;
    their output row is zero.
    """
    values = as_tensor(values)
    groups = np.asarray(groups, dtype=np.int64)
    if groups.shape[0] != values.shape[0]:
        raise ValueError(f"{groups.shape[0]} group ids for {values.shape[0]} rows")
    if groups.size and (groups.min() < 0 or groups.max() >= n_groups):
        raise IndexError(f"group index out of range [0, {n_groups})")
    counts = np.bincount(groups, minlength=n_groups)
    weights = 1.0 / counts[groups] if groups.size else np.zeros(0)
    m = sp.csr_matrix((weights, (groups, np.arange(groups.size))), shape=(n_groups, groups.size))
    return sparse_matmul(m, values), counts == 0

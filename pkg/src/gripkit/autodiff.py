"""A small reverse-mode differentiation tape over float64 numpy arrays.

Each non-leaf ``Tensor`` keeps the tensors it was computed from together
with a vector-Jacobian product closure. ``Tensor.backward`` walks the graph
in reverse topological order, accumulates into the ``grad`` of leaves that
require gradients, and consumes the tape: intermediate tensors cannot be
back-propagated through a second time.
"""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np
import scipy.sparse as sp

_grad_enabled = True


class TapeError(RuntimeError):
    """Backward through a consumed tape, or a malformed backward call."""


@contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_consumed", "name")
    __array_priority__ = 100

    def __init__(self, value, requires_grad: bool = False, name: str = None, _parents=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.value) if (requires_grad and not _parents) else None
        self._parents = _parents
        self._consumed = False
        self.name = name

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.value.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def backward(self, grad=None):
        if self._consumed:
            raise TapeError("tape already consumed by an earlier backward pass")
        if not self.requires_grad:
            raise TapeError("tensor does not require gradients")
        if grad is None:
            if self.value.size != 1:
                raise TapeError("backward without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.value)
        grads = {id(self): np.asarray(grad, dtype=np.float64).reshape(self.value.shape)}
        for node in _topological(self):
            g = grads.pop(id(node), None)
            if node.is_leaf:
                if g is not None:
                    node.grad += g
                continue
            if g is not None:
                for parent, vjp in node._parents:
                    pg = vjp(g)
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            node._parents = ()
            node._consumed = True


def _topological(root: Tensor) -> list:
    """Nodes reachable from root, every node listed before its parents."""
    order, seen = [], set()
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
        for parent, _ in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    order.reverse()
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _result(value, *links) -> Tensor:
    """Wrap a forward value; links are (input tensor, vjp) pairs."""
    for t, _ in links:
        if t._consumed:
            raise TapeError("cannot build on a tensor whose tape was consumed")
    if not _grad_enabled:
        return Tensor(value)
    live = tuple((t, f) for t, f in links if t.requires_grad)
    return Tensor(value, requires_grad=bool(live), _parents=live)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.value + b.value,
                   (a, lambda g: _unbroadcast(g, a.shape)),
                   (b, lambda g: _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.value - b.value,
                   (a, lambda g: _unbroadcast(g, a.shape)),
                   (b, lambda g: -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return _result(av * bv,
                   (a, lambda g: _unbroadcast(g * bv, a.shape)),
                   (b, lambda g: _unbroadcast(g * av, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    out = av / bv
    return _result(out,
                   (a, lambda g: _unbroadcast(g / bv, a.shape)),
                   (b, lambda g: _unbroadcast(-g * out / bv, b.shape)))


def safe_div(a, b) -> Tensor:
    """a / b where b != 0, and 0 where b == 0 (gradient 0 there too)."""
    a, b = as_tensor(a), as_tensor(b)
    av, bv = np.broadcast_arrays(a.value, b.value)
    nz = bv != 0
    safe = np.where(nz, bv, 1.0)
    out = np.where(nz, av / safe, 0.0)
    return _result(out,
                   (a, lambda g: _unbroadcast(np.where(nz, g / safe, 0.0), a.shape)),
                   (b, lambda g: _unbroadcast(np.where(nz, -g * out / safe, 0.0), b.shape)))


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _result(c * x.value, (x, lambda g: c * g))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return _result(av @ bv, (a, lambda g: g @ bv.T), (b, lambda g: av.T @ g))


def spmm(M, X) -> Tensor:
    """Constant sparse (or dense) matrix times a tensor."""
    X = as_tensor(X)
    return _result(M @ X.value, (X, lambda g: M.T @ g))


def graph_aggregate(g, X) -> Tensor:
    """Symmetric self-loop normalised aggregation of node features."""
    A = g.gcn_operator
    X = as_tensor(X)
    return _result(A @ X.value, (X, lambda grad: A @ grad))


def linear_map(forward, adjoint, X) -> Tensor:
    """Apply a fixed linear operator whose adjoint is known."""
    X = as_tensor(X)
    return _result(forward(X.value), (X, lambda g: adjoint(g)))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.value > 0
    # np.maximum keeps NaN, so a broken state is not silently zeroed
    return _result(np.maximum(x.value, 0.0), (x, lambda g: g * mask))


def softplus(x) -> Tensor:
    x = as_tensor(x)
    v = x.value
    out = np.logaddexp(0.0, v)
    sig = 0.5 * (1.0 + np.tanh(0.5 * v))
    return _result(out, (x, lambda g: g * sig))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.value)
    return _result(out, (x, lambda g: g * out))


def log(x) -> Tensor:
    x = as_tensor(x)
    v = x.value
    return _result(np.log(v), (x, lambda g: g / v))


def square(x) -> Tensor:
    x = as_tensor(x)
    v = x.value
    return _result(v * v, (x, lambda g: 2.0 * g * v))


def clamp_min(x, floor: float) -> Tensor:
    x = as_tensor(x)
    mask = x.value > floor
    return _result(np.where(mask, x.value, floor), (x, lambda g: g * mask))


def concat_cols(tensors) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    widths = np.cumsum([0] + [t.shape[1] for t in ts])
    out = np.concatenate([t.value for t in ts], axis=1)
    links = [(t, (lambda g, a=a, b=b: g[:, a:b])) for t, a, b in zip(ts, widths[:-1], widths[1:])]
    return _result(out, *links)


def concat_rows(tensors) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    heights = np.cumsum([0] + [t.shape[0] for t in ts])
    out = np.concatenate([t.value for t in ts], axis=0)
    links = [(t, (lambda g, a=a, b=b: g[a:b])) for t, a, b in zip(ts, heights[:-1], heights[1:])]
    return _result(out, *links)


def row_softmax(x) -> Tensor:
    x = as_tensor(x)
    z = x.value - x.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    return _result(s, (x, lambda g: s * (g - (g * s).sum(axis=1, keepdims=True))))


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    z = x.value - x.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _result(out, (x, lambda g: g - s * g.sum(axis=1, keepdims=True)))


def gather_rows(x, idx) -> Tensor:
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    n = x.shape[0]

    def vjp(g):
        out = np.zeros((n,) + g.shape[1:])
        np.add.at(out, idx, g)
        return out

    return _result(x.value[idx], (x, vjp))


def scatter_rows(x, idx, n: int) -> Tensor:
    """Rows of x added into an n-row zero matrix at positions idx."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    out = np.zeros((n,) + x.shape[1:])
    np.add.at(out, idx, x.value)
    return _result(out, (x, lambda g: g[idx]))


segment_sum = scatter_rows


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape
    out = x.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return _result(out, (x, vjp))


def mean(x) -> Tensor:
    x = as_tensor(x)
    return scale(sum(x), 1.0 / x.value.size)


def edge_transition(g, w, X) -> Tensor:
    """P(w) X where P(w) is the row-normalised weighted adjacency.

    ``w`` holds one non-negative weight per undirected edge of ``g``;
    rows with zero total weight pass X through unchanged.
    """
    w, X = as_tensor(w), as_tensor(X)
    wv = w.value.reshape(-1)
    eid = g.directed_edge_id
    rows, cols = g.row_idx, g.col_idx
    wd = wv[eid]
    W = sp.csr_matrix((wd, cols, g.row_ptr), shape=(g.n, g.n))
    s = np.asarray(W.sum(axis=1)).ravel()
    dead = s == 0
    s_safe = np.where(dead, 1.0, s)
    WX = W @ X.value
    Y = WX / s_safe[:, None]
    Y[dead] = X.value[dead]

    def vjp_x(gy):
        gs = gy / s_safe[:, None]
        gs[dead] = 0.0
        out = W.T @ gs
        out[dead] += gy[dead]
        return out

    def vjp_w(gy):
        gs = gy / s_safe[:, None]
        gs[dead] = 0.0
        # d Y_i / d w_ij = (X_j - Y_i) / s_i
        contrib = np.einsum("ec,ec->e", gs[rows], X.value[cols] - Y[rows])
        out = np.bincount(eid, weights=contrib, minlength=len(wv))
        return out.reshape(w.shape)

    return _result(Y, (X, vjp_x), (w, vjp_w))


def gradcheck(fn, inputs, h: float = 1e-6, seed: int = 0) -> float:
    """Worst relative error between tape and central-difference gradients.

    ``fn`` maps the list of input tensors to a tensor; the check contracts
    the output with a fixed random direction so any output shape works.
    """
    rng = np.random.default_rng(seed)
    ins = [Tensor(np.array(v, dtype=np.float64), requires_grad=True) for v in inputs]
    out = fn(ins)
    direction = rng.standard_normal(out.shape)
    out.backward(direction)
    worst = 0.0
    for t in ins:
        num = np.zeros_like(t.value)
        flat = t.value.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            with no_grad():
                fp = float(np.sum(fn(ins).value * direction))
            flat[i] = old - h
            with no_grad():
                fm = float(np.sum(fn(ins).value * direction))
            flat[i] = old
            nflat[i] = (fp - fm) / (2 * h)
        denom = max(np.linalg.norm(num), np.linalg.norm(t.grad), 1e-12)
        worst = max(worst, float(np.linalg.norm(num - t.grad) / denom))
    return worst

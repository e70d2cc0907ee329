"""Reverse-mode autodiff over dense numpy arrays.

The graph is implicit: every op returns a `Tensor` holding parent links and a
local gradient closure; `backward` walks the tape once in reverse topological
order. Construction and backward are single-threaded; tensors are safe to
share read-only across threads for forward evaluation.

Gradients are accumulated out-of-place (`t.grad = t.grad + g`), so a closure
may hand the same array to several parents without aliasing bugs.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from ..errors import ShapeError

_GRAD_ENABLED = True
_DEBUG_CHECKS = False


@contextmanager
def no_grad():
    """Disable tape construction inside the block (forward-only inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def set_debug_checks(on: bool) -> None:
    """When on, every op asserts its output is finite."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(on)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def backward(self, seed=None) -> None:
        backward(self, seed)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def _coerce(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    if _DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced by an op")
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` over axes that were broadcast so it matches `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(t: Tensor, seed=None) -> None:
    """Run reverse-mode accumulation from `t`; each node is visited once."""
    if seed is None:
        if t.data.size != 1:
            raise ShapeError("backward without seed requires a scalar output")
        seed = np.ones_like(t.data)
    t.grad = np.asarray(seed, dtype=t.data.dtype) + (t.grad if t.grad is not None else 0.0)

    # Iterative DFS: LSTM chains are thousands of nodes deep.
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(t, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _coerce(a)
    b = _coerce(b, like=a)

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _node(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a = _coerce(a)
    b = _coerce(b, like=a)

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _node(a.data - b.data, (a, b), bw)


def neg(a) -> Tensor:
    a = _coerce(a)

    def bw(g):
        _accum(a, -g)

    return _node(-a.data, (a,), bw)


def mul(a, b) -> Tensor:
    a = _coerce(a)
    b = _coerce(b, like=a)

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(a.data * b.data, (a, b), bw)


def matmul(a, b) -> Tensor:
    a = _coerce(a)
    b = _coerce(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must have rank >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")

    def bw(g):
        _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _node(a.data @ b.data, (a, b), bw)


def transpose(a, axes=None) -> Tensor:
    a = _coerce(a)
    ax = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(ax))

    def bw(g):
        _accum(a, np.transpose(g, inv))

    return _node(np.transpose(a.data, ax), (a,), bw)


def swap_last2(a) -> Tensor:
    """Transpose the trailing two axes (batch dims untouched)."""
    a = _coerce(a)
    ax = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return transpose(a, ax)


def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    old = a.data.shape

    def bw(g):
        _accum(a, g.reshape(old))

    return _node(a.data.reshape(shape), (a,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [_coerce(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(ts, np.split(g, offsets, axis=axis)):
            _accum(t, piece)

    return _node(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), bw)


def slice_(a, key) -> Tensor:
    """Basic (slice/int/ellipsis) indexing; gradients scatter back to `a`."""
    a = _coerce(a)

    def bw(g):
        full = np.zeros_like(a.data)
        full[key] = g
        _accum(a, full)

    return _node(a.data[key], (a,), bw)


def take_rows(a, idx) -> Tensor:
    """Gather along the time axis.

    rank-2 input (T, D) with idx (T',) or rank-3 (B, T, D) with idx (B, T');
    repeated indices accumulate gradient.
    """
    a = _coerce(a)
    idx = np.asarray(idx, dtype=np.intp)
    if a.ndim == 2:
        def bw(g):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            _accum(a, full)

        return _node(a.data[idx], (a,), bw)
    if a.ndim == 3:
        if idx.ndim != 2 or idx.shape[0] != a.data.shape[0]:
            raise ShapeError("rank-3 take_rows needs idx of shape (B, T')")
        bsel = np.arange(a.data.shape[0])[:, None]

        def bw(g):
            full = np.zeros_like(a.data)
            np.add.at(full, (bsel, idx), g)
            _accum(a, full)

        return _node(a.data[bsel, idx], (a,), bw)
    raise ShapeError("take_rows supports rank-2 or rank-3 inputs")


# ---------------------------------------------------------------------------
# nonlinearities and reductions
# ---------------------------------------------------------------------------


def sigmoid(a) -> Tensor:
    a = _coerce(a)
    with np.errstate(over="ignore"):
        y = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g):
        _accum(a, g * y * (1.0 - y))

    return _node(y, (a,), bw)


def tanh(a) -> Tensor:
    a = _coerce(a)
    y = np.tanh(a.data)

    def bw(g):
        _accum(a, g * (1.0 - y * y))

    return _node(y, (a,), bw)


def relu(a) -> Tensor:
    a = _coerce(a)

    def bw(g):
        _accum(a, g * (a.data > 0))

    return _node(np.maximum(a.data, 0.0), (a,), bw)


def exp(a) -> Tensor:
    a = _coerce(a)
    y = np.exp(a.data)

    def bw(g):
        _accum(a, g * y)

    return _node(y, (a,), bw)


def log(a) -> Tensor:
    a = _coerce(a)

    def bw(g):
        _accum(a, g / a.data)

    return _node(np.log(a.data), (a,), bw)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes through where lo <= x <= hi."""
    a = _coerce(a)
    mask = (a.data >= lo) & (a.data <= hi)

    def bw(g):
        _accum(a, g * mask)

    return _node(np.clip(a.data, lo, hi), (a,), bw)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    shape = a.data.shape

    def bw(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, shape).copy())

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(a) -> Tensor:
    """Row-wise softmax over the last axis."""
    a = _coerce(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accum(a, y * (g - dot))

    return _node(y, (a,), bw)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x = _coerce(x)
    gamma = _coerce(gamma, like=x)
    beta = _coerce(beta, like=x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = gamma.data * xhat + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        _accum(beta, g.sum(axis=lead))
        _accum(gamma, (g * xhat).sum(axis=lead))
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accum(x, inv * (dxhat - m1 - xhat * m2))

    return _node(y, (x, gamma, beta), bw)


def dropout(x, mask) -> Tensor:
    """Multiply by a caller-supplied keep mask (already scaled if desired)."""
    x = _coerce(x)
    return mul(x, Tensor(np.asarray(mask, dtype=x.data.dtype)))


def linear(x, w, b) -> Tensor:
    """Affine map x @ w + b."""
    return add(matmul(x, w), b)


# ---------------------------------------------------------------------------
# LSTM cell
# ---------------------------------------------------------------------------


@dataclass
class LstmParams:
    """Weights of a single LSTM layer; gate order along columns is i, f, g, o."""

    w_x: Tensor  # (d_in, 4H)
    w_h: Tensor  # (H, 4H)
    b: Tensor  # (4H,)

    @property
    def hidden(self) -> int:
        return self.w_h.data.shape[0]

    @classmethod
    def create(cls, rng: np.random.Generator, d_in: int, d_hidden: int,
               dtype=np.float32, forget_bias: float = 1.0) -> "LstmParams":
        k = 1.0 / np.sqrt(d_hidden)
        w_x = rng.uniform(-k, k, size=(d_in, 4 * d_hidden))
        w_h = rng.uniform(-k, k, size=(d_hidden, 4 * d_hidden))
        b = np.zeros(4 * d_hidden)
        b[d_hidden : 2 * d_hidden] = forget_bias
        return cls(
            Tensor(w_x.astype(dtype), requires_grad=True),
            Tensor(w_h.astype(dtype), requires_grad=True),
            Tensor(b.astype(dtype), requires_grad=True),
        )

    def tensors(self) -> dict[str, Tensor]:
        return {"w_x": self.w_x, "w_h": self.w_h, "b": self.b}


def lstm_cell(x, h_prev, c_prev, params: LstmParams) -> tuple[Tensor, Tensor]:
    """One LSTM step on a (B, d_in) input with (B, H) states."""
    x = _coerce(x)
    h_prev = _coerce(h_prev)
    c_prev = _coerce(c_prev)
    hid = params.hidden
    if x.data.shape[-1] != params.w_x.data.shape[0] or h_prev.data.shape[-1] != hid:
        raise ShapeError("lstm_cell operand widths do not match parameters")
    z = add(add(matmul(x, params.w_x), matmul(h_prev, params.w_h)), params.b)
    i = sigmoid(slice_(z, (Ellipsis, slice(0, hid))))
    f = sigmoid(slice_(z, (Ellipsis, slice(hid, 2 * hid))))
    g = tanh(slice_(z, (Ellipsis, slice(2 * hid, 3 * hid))))
    o = sigmoid(slice_(z, (Ellipsis, slice(3 * hid, 4 * hid))))
    c = add(mul(f, c_prev), mul(i, g))
    h = mul(o, tanh(c))
    return h, c

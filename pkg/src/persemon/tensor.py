"""Reverse-mode automatic differentiation over float64 numpy arrays.

Each :class:`Tensor` produced by an operation remembers its parents and a
closure that pushes the output gradient back onto them.  ``backward`` walks
the graph once in reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block; outputs are constants."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """A forward or backward pass produced NaN or Inf."""


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None, op: str = ""):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        _check_finite(arr, op or name or "tensor")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op
        self.name = name

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = self.name or self.op or "leaf"
        return f"Tensor({label}, shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        """Same values, cut from the graph."""
        return Tensor(self.data, requires_grad=False, op="detach")

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    # -- graph traversal ------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {self.shape}")
        order = _topo_order(self)
        for node in order:
            if node._parents:
                node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            _check_finite(node.grad, f"gradient of {node.op}")
            node._backward(node.grad)
        for node in order:
            if not node._parents and node.grad is not None:
                _check_finite(node.grad, f"gradient of {node.name or 'leaf'}")

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
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


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    live = tuple(p for p in parents if p.requires_grad) if _GRAD_ENABLED else ()
    if not live:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=live, _backward=backward, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul of {a.shape} and {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    return _make(a.data @ b.data, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# reductions and reshaping
# ---------------------------------------------------------------------------

def sum_(x: Tensor, axis=None) -> Tensor:
    out = x.data.sum(axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        x._accum(np.broadcast_to(g, x.shape))

    return _make(out, (x,), backward, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    out = x.data.mean(axis=axis)
    count = x.data.size // max(out.size, 1)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        x._accum(np.broadcast_to(g / count, x.shape))

    return _make(out, (x,), backward, "mean")


def max_(x: Tensor, axis: int) -> Tensor:
    """Maximum along ``axis``; ties send the gradient to the first maximiser."""
    idx = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        x._accum(full)

    return _make(out, (x,), backward, "max")


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        x._accum(g.reshape(x.shape))

    return _make(out, (x,), backward, "reshape")


def take(x: Tensor, idx) -> Tensor:
    """Basic or integer-array indexing."""
    out = x.data[idx]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        x._accum(full)

    return _make(out, (x,), backward, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    return _make(out, tensors, backward, "concat")


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        x._accum(g * mask)

    return _make(x.data * mask, (x,), backward, "relu")


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """Parametric ReLU with one learnable slope per channel (axis 1)."""
    if slope.ndim != 1 or x.ndim < 2 or slope.shape[0] != x.shape[1]:
        raise DimensionError(f"prelu slope {slope.shape} for input {x.shape}")
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    a = slope.data.reshape(bshape)
    pos = x.data > 0
    out = np.where(pos, x.data, a * x.data)
    red_axes = (0,) + tuple(range(2, x.ndim))

    def backward(g):
        if x.requires_grad:
            x._accum(np.where(pos, g, a * g))
        if slope.requires_grad:
            slope._accum(np.where(pos, 0.0, g * x.data).sum(axis=red_axes))

    return _make(out, (x, slope), backward, "prelu")


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def backward(g):
        x._accum(g * out * (1.0 - out))

    return _make(out, (x,), backward, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward(g):
        x._accum(g * (1.0 - out * out))

    return _make(out, (x,), backward, "tanh")


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    out = np.exp(_log_softmax(x.data))

    def backward(g):
        x._accum(out * (g - (g * out).sum(axis=-1, keepdims=True)))

    return _make(out, (x,), backward, "softmax")


def log_softmax(x: Tensor) -> Tensor:
    out = _log_softmax(x.data)
    p = np.exp(out)

    def backward(g):
        x._accum(g - p * g.sum(axis=-1, keepdims=True))

    return _make(out, (x,), backward, "log_softmax")


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def conv_output_size(n: int, k: int, stride: int) -> int:
    pad = k // 2
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """Zero-padded 2-D cross-correlation, no bias.

    Padding is ``k // 2`` on every side, so stride 1 keeps the spatial size
    and stride 2 yields ``ceil(H / 2)``.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    f, cw, k, k2 = w.shape
    if cw != c or k != k2:
        raise DimensionError(f"weight {w.shape} does not match input channels {c}")
    if k > h + 2 * (k // 2) or k > wd + 2 * (k // 2):
        raise DimensionError(f"kernel {k} larger than padded input {h}x{wd}")
    if stride < 1:
        raise DimensionError(f"stride must be >= 1, got {stride}")
    pad = k // 2
    ho, wo = conv_output_size(h, k, stride), conv_output_size(wd, k, stride)
    # channel-major im2col: rows (c, i, j), columns (n, y, x)
    xp = np.zeros((c, n, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x.data.transpose(1, 0, 2, 3)
    cols = np.empty((c, k, k, n, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols = cols.reshape(c * k * k, n * ho * wo)
    wmat = w.data.reshape(f, c * k * k)
    out = (wmat @ cols).reshape(f, n, ho, wo).transpose(1, 0, 2, 3)

    def backward(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(f, n * ho * wo)
        if w.requires_grad:
            w._accum((gmat @ cols.T).reshape(w.shape))
        if x.requires_grad:
            dcols = (wmat.T @ gmat).reshape(c, k, k, n, ho, wo)
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
            x._accum(dxp[:, :, pad:pad + h, pad:pad + wd].transpose(1, 0, 2, 3))

    return _make(np.ascontiguousarray(out), (x, w), backward, "conv2d")


def residual_unit(x: Tensor, w1: Tensor, w2: Tensor,
                  act: Callable[[Tensor, int], Tensor] | None = None) -> Tensor:
    """``x + conv(act(conv(act(x))))`` with two channel-preserving 3x3 convs.

    ``act(t, i)`` receives the tensor and the position (0 or 1) of the
    activation inside the unit; ReLU when omitted.
    """
    c = x.shape[1]
    for wt in (w1, w2):
        if wt.shape[0] != c or wt.shape[1] != c:
            raise DimensionError(f"residual unit needs {c}->{c} kernels, got {wt.shape}")
    if act is None:
        act = lambda t, i: relu(t)  # noqa: E731
    h = conv2d(act(x, 0), w1, 1)
    h = conv2d(act(h, 1), w2, 1)
    return add(x, h)


def fully_connected(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
        raise DimensionError(f"fully_connected shapes {x.shape}, {w.shape}, {b.shape}")
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise DimensionError(f"fully_connected shapes {x.shape}, {w.shape}, {b.shape}")
    out = x.data @ w.data + b.data

    def backward(g):
        if x.requires_grad:
            x._accum(g @ w.data.T)
        if w.requires_grad:
            w._accum(x.data.T @ g)
        if b.requires_grad:
            b._accum(g.sum(axis=0))

    return _make(out, (x, w, b), backward, "fully_connected")


def average_pool(x: Tensor) -> Tensor:
    """Global spatial mean: (N, C, H, W) -> (N, C)."""
    if x.ndim != 4:
        raise DimensionError(f"average_pool expects 4-D input, got {x.shape}")
    hw = x.shape[2] * x.shape[3]

    def backward(g):
        x._accum(np.broadcast_to(g[:, :, None, None] / hw, x.shape))

    return _make(x.data.mean(axis=(2, 3)), (x,), backward, "average_pool")


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


# ---------------------------------------------------------------------------
# fused losses
# ---------------------------------------------------------------------------

CONTINUOUS = "continuous"
PAPER_LITERAL = "paper_literal"


def smooth_l1_values(x: np.ndarray, margin: float, variant: str = CONTINUOUS) -> np.ndarray:
    if margin <= 0:
        raise ValueError(f"margin must be positive, got {margin}")
    ax = np.abs(x)
    inside = ax < margin
    if variant == CONTINUOUS:
        return np.where(inside, x * x / (2.0 * margin), ax - 0.5 * margin)
    if variant == PAPER_LITERAL:
        return np.where(inside, 0.5 * x * x, ax - 0.5)
    raise ValueError(f"unknown smooth-l1 variant {variant!r}")


def smooth_l1(x: Tensor, margin: float, variant: str = CONTINUOUS) -> Tensor:
    """Elementwise smooth-l1 of a residual tensor."""
    out = smooth_l1_values(x.data, margin, variant)
    inside = np.abs(x.data) < margin
    scale = 1.0 / margin if variant == CONTINUOUS else 1.0

    def backward(g):
        x._accum(g * np.where(inside, x.data * scale, np.sign(x.data)))

    return _make(out, (x,), backward, "smooth_l1")


def cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """Per-row cross-entropy ``-sum(target * log_softmax(logits))``."""
    target = np.broadcast_to(np.asarray(target, dtype=DTYPE), logits.shape)
    logp = _log_softmax(logits.data)
    out = -(target * logp).sum(axis=-1)
    p = np.exp(logp)
    tsum = target.sum(axis=-1, keepdims=True)

    def backward(g):
        logits._accum(g[..., None] * (p * tsum - target))

    return _make(out, (logits,), backward, "cross_entropy")


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad and not t._parents]

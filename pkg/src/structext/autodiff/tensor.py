"""Dense arrays with tape-based reverse-mode differentiation.

Every differentiable operation executed while a :class:`Tape` is active is
appended to it in creation order; ``Tape.backward`` walks that list in reverse,
which is a valid reverse topological order by construction.

There is no implicit broadcasting: binary operations require identical shapes
(python scalars excepted).  Use :func:`expand` to broadcast explicitly.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np

_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def get_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Switch the default floating type (float32 for training, float64 for gradient checks)."""
    previous = get_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = previous


def debug_enabled() -> bool:
    return getattr(_state, "debug", False)


@contextmanager
def debug_mode(enabled: bool = True) -> Iterator[None]:
    """Enable NaN guards on exp/log and attention-normalisation checks."""
    previous = debug_enabled()
    _state.debug = enabled
    try:
        yield
    finally:
        _state.debug = previous


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Records differentiable nodes in creation order for a single backward pass."""

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, node: "Tensor") -> None:
        self.nodes.append(node)

    def backward(self, root: "Tensor", grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            grad = np.ones_like(root.value)
        root.grad = np.asarray(grad, dtype=root.value.dtype)
        for node in reversed(self.nodes):
            if node.grad is None or node._backward is None:
                continue
            node._backward(node.grad)
        # intermediate buffers are not needed after one pass
        for node in self.nodes:
            node._backward = None
            node._parents = ()
        self.nodes = []


ArrayLike = Union["Tensor", np.ndarray, float, int]


class Tensor:
    """A node in the computation graph: value, lazily allocated grad, parents."""

    __slots__ = ("value", "grad", "requires_grad", "name", "_parents", "_backward", "_tape")
    __array_priority__ = 100

    def __init__(self, value, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.array(value, dtype=dtype or get_dtype())
        arr.flags.writeable = False
        self.value = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if self._tape is None:
            raise RuntimeError("tensor was not recorded on a tape")
        self._tape.backward(self, grad)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(as_tensor(other), self) if not np.isscalar(other) else add(neg(self), other)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, key):
        raise TypeError("use gather_rows / reshape for indexing tensors")


def as_tensor(x: ArrayLike) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.value.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match value shape {t.value.shape}")
    if t.grad is None:
        t.grad = np.array(g, dtype=t.value.dtype, copy=True)
    else:
        t.grad = t.grad + g


def _make(value: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor.__new__(Tensor)
    value = np.asarray(value)
    if value.dtype != get_dtype() and value.dtype.kind == "f":
        value = value.astype(get_dtype())
    value.flags.writeable = False
    out.value = value
    out.grad = None
    out.name = None
    out._parents = ()
    out._backward = None
    out._tape = None
    tape = active_tape()
    out.requires_grad = tape is not None and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
        out._tape = tape
        tape.record(out)
    return out


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no implicit broadcasting)")


def _guard(op: str, arr: np.ndarray) -> None:
    if debug_enabled() and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{op}: non-finite values produced")


# ---------------------------------------------------------------- elementwise


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    if np.isscalar(b):
        a = as_tensor(a)
        return _make(a.value + b, (a,), lambda g: _accumulate(a, g))
    if np.isscalar(a):
        return add(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("add", a, b)

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _make(a.value + b.value, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _make(-a.value, (a,), lambda g: _accumulate(a, -g))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    if np.isscalar(b):
        return add(a, -b)
    if np.isscalar(a):
        return add(neg(b), a)
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("sub", a, b)

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _make(a.value - b.value, (a, b), backward)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    if np.isscalar(b):
        a = as_tensor(a)
        return _make(a.value * b, (a,), lambda g: _accumulate(a, g * b))
    if np.isscalar(a):
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("mul", a, b)

    def backward(g):
        _accumulate(a, g * b.value)
        _accumulate(b, g * a.value)

    return _make(a.value * b.value, (a, b), backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.value
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)

    def backward(g):
        _accumulate(a, g * out * (1.0 - out))

    return _make(out, (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return _make(a.value * mask, (a,), lambda g: _accumulate(a, g * mask))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.value)
    _guard("exp", out)
    return _make(out, (a,), lambda g: _accumulate(a, g * out))


def log(a: Tensor) -> Tensor:
    if debug_enabled() and np.any(a.value <= 0):
        raise FloatingPointError("log: non-positive input")
    out = np.log(a.value)
    return _make(out, (a,), lambda g: _accumulate(a, g / a.value))


def elementwise(op: str, a: Tensor, b: Optional[ArrayLike] = None) -> Tensor:
    """Dispatch by name: add, sub, mul, sigmoid, relu, exp, log."""
    binary = {"add": add, "sub": sub, "mul": mul}
    unary = {"sigmoid": sigmoid, "relu": relu, "exp": exp, "log": log}
    if op in binary:
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return binary[op](a, b)
    if op in unary:
        return unary[op](a)
    raise ValueError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _make(a.value.reshape(shape), (a,), lambda g: _accumulate(a, g.reshape(old)))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(a.value.transpose(axes), (a,), lambda g: _accumulate(a, g.transpose(inverse)))


def expand(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast of ``a`` to ``shape``; leading axes may be added."""
    shape = tuple(shape)
    src = a.shape
    try:
        out = np.broadcast_to(a.value, shape)
    except ValueError:
        raise ShapeError(f"expand: cannot broadcast {src} to {shape}") from None
    lead = len(shape) - len(src)

    def backward(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        _accumulate(a, g)

    return _make(np.ascontiguousarray(out), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.value for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, part in zip(tensors, np.split(g, splits, axis=axis)):
            _accumulate(t, part)

    return _make(out, tensors, backward)


def sum(a: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = a.shape
    out = a.value.sum(axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, shape))

    return _make(np.asarray(out), (a,), backward)


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    n = a.value.size if axis is None else a.shape[axis]
    return mul(sum(a, axis), 1.0 / max(n, 1))


def gather_rows(table: Tensor, indices) -> Tensor:
    """Row lookup ``table[indices]``; backward scatter-adds into the table."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if table.ndim != 2:
        raise ShapeError(f"gather_rows: table must be 2-D, got shape {table.shape}")
    v = table.shape[0]
    bad = idx[(idx < 0) | (idx >= v)]
    if bad.size:
        raise IndexError(f"gather_rows: index {int(bad[0])} out of range for table with {v} rows")

    def backward(g):
        if not table.requires_grad:
            return
        full = np.zeros_like(table.value)
        np.add.at(full, idx, g)
        _accumulate(table, full)

    return _make(table.value[idx], (table,), backward)


def bilinear_gather(table: Tensor, indices: np.ndarray, weights: np.ndarray) -> Tensor:
    """out[r] = sum_k weights[r, k] * table[indices[r, k]] (a fixed sparse interpolation)."""
    idx = np.asarray(indices, dtype=np.int64)
    w = np.asarray(weights, dtype=table.dtype)
    if idx.shape != w.shape or idx.ndim != 2:
        raise ShapeError(f"bilinear_gather: indices {idx.shape} and weights {w.shape} must match")
    out = np.einsum("rk,rkd->rd", w, table.value[idx]) if idx.size else np.zeros((0, table.shape[1]), table.dtype)

    def backward(g):
        if not table.requires_grad:
            return
        full = np.zeros_like(table.value)
        np.add.at(full, idx.reshape(-1), (w[:, :, None] * g[:, None, :]).reshape(-1, table.shape[1]))
        _accumulate(table, full)

    return _make(out, (table,), backward)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ np.swapaxes(b.value, -1, -2))
        if b.requires_grad:
            _accumulate(b, np.swapaxes(a.value, -1, -2) @ g)

    return _make(a.value @ b.value, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` applied over the last axis of ``x``."""
    k, n = weight.shape
    if x.shape[-1] != k:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (n,):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.value.reshape(-1, k)
    out = x2 @ weight.value
    if bias is not None:
        out = out + bias.value

    def backward(g):
        g2 = g.reshape(-1, n)
        if x.requires_grad:
            _accumulate(x, (g2 @ weight.value.T).reshape(x.shape))
        if weight.requires_grad:
            _accumulate(weight, x2.T @ g2)
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g2.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out.reshape(lead + (n,)), parents, backward)


# ---------------------------------------------------------------- normalisation / probabilities


def softmax(a: Tensor, additive_mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis; ``additive_mask`` is a constant added to the logits."""
    x = a.value if additive_mask is None else a.value + additive_mask
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _accumulate(a, out * (g - (g * out).sum(axis=-1, keepdims=True)))

    return _make(out, (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match last axis {d}")
    mu = x.value.mean(axis=-1, keepdims=True)
    xc = x.value - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.value + bias.value

    def backward(g):
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accumulate(bias, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.value
            gx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            _accumulate(x, gx)

    return _make(out, (x, gain, bias), backward)


def softmax_cross_entropy(logits: Tensor, targets, ignore_index: int = -100) -> Tensor:
    """Mean negative log-likelihood over rows whose target is not ``ignore_index``.

    If every row is ignored the loss is 0 with zero gradient and the returned
    tensor carries ``name == "empty"`` as a warning flag.
    """
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be 2-D, got {logits.shape}")
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, c = logits.shape
    if t.shape[0] != n:
        raise ShapeError(f"softmax_cross_entropy: {n} rows but {t.shape[0]} targets")
    keep = t != ignore_index
    if np.any((t[keep] < 0) | (t[keep] >= c)):
        raise IndexError(f"softmax_cross_entropy: target out of range [0, {c})")
    count = int(keep.sum())
    if count == 0:
        out = _make(np.zeros((), logits.dtype), (logits,), lambda g: None)
        out.name = "empty"
        return out
    x = logits.value - logits.value.max(axis=1, keepdims=True)
    logz = np.log(np.exp(x).sum(axis=1, keepdims=True))
    logp = x - logz
    rows = np.nonzero(keep)[0]
    loss = -logp[rows, t[rows]].sum() / count

    def backward(g):
        grad = np.exp(logp)
        grad[rows, t[rows]] -= 1.0
        grad[~keep] = 0.0
        _accumulate(logits, grad * (g / count))

    return _make(np.asarray(loss), (logits,), backward)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against 0/1 targets."""
    y = np.asarray(targets, dtype=logits.dtype).reshape(logits.shape)
    x = logits.value
    n = max(x.size, 1)
    # softplus(x) - x*y, stable for large |x|
    loss = (np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))).sum() / n

    def backward(g):
        e = np.exp(-np.abs(x))
        p = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        _accumulate(logits, (p - y) * (g / n))

    return _make(np.asarray(loss), (logits,), backward)


def dropout(a: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    if rng is None or rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / (1.0 - rate)
    return _make(a.value * keep, (a,), lambda g: _accumulate(a, g * keep))


# ---------------------------------------------------------------- convolution (channels-last)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, padding: int = 1) -> Tensor:
    """Stride-1 convolution. x: [B, H, W, C], weight: [k, k, C, O], bias: [O] -> [B, H', W', O]."""
    B, H, W, C = x.shape
    k, k2, C2, O = weight.shape
    if C != C2 or k != k2:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    p = padding
    xp = np.pad(x.value, ((0, 0), (p, p), (p, p), (0, 0)))
    Ho, Wo = H + 2 * p - k + 1, W + 2 * p - k + 1
    taps = [(i, j) for i in range(k) for j in range(k)]
    cols = np.concatenate([xp[:, i:i + Ho, j:j + Wo, :] for i, j in taps], axis=-1).reshape(-1, k * k * C)
    wmat = weight.value.reshape(k * k * C, O)
    out = (cols @ wmat + bias.value).reshape(B, Ho, Wo, O)

    def backward(g):
        g2 = g.reshape(-1, O)
        if weight.requires_grad:
            _accumulate(weight, (cols.T @ g2).reshape(weight.shape))
        if bias.requires_grad:
            _accumulate(bias, g2.sum(axis=0))
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(B, Ho, Wo, k * k, C)
            dxp = np.zeros_like(xp)
            for t, (i, j) in enumerate(taps):
                dxp[:, i:i + Ho, j:j + Wo, :] += dcols[:, :, :, t, :]
            _accumulate(x, dxp[:, p:p + H, p:p + W, :])

    return _make(out, (x, weight, bias), backward)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """2x2 max pooling with stride 2 on [B, H, W, C]; ties go to the first window element."""
    if size != 2:
        raise ValueError("only 2x2 pooling is supported")
    B, H, W, C = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"max_pool2d: spatial shape {(H, W)} not divisible by 2")
    v = x.value
    quads = [v[:, 0::2, 0::2], v[:, 0::2, 1::2], v[:, 1::2, 0::2], v[:, 1::2, 1::2]]
    out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))

    def backward(g):
        dx = np.zeros_like(v)
        taken = np.zeros(out.shape, dtype=bool)
        for q, (i, j) in zip(quads, ((0, 0), (0, 1), (1, 0), (1, 1))):
            hit = (q == out) & ~taken
            taken |= hit
            dx[:, i::2, j::2] = g * hit
        _accumulate(x, dx)

    return _make(out, (x,), backward)

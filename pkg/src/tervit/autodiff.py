"""Dense tensors with define-by-run reverse-mode differentiation.

Operations executed while a :class:`GradTape` is active are recorded on it
whenever at least one input requires a gradient. ``backward`` replays the
tape in reverse and accumulates into ``Tensor.grad``.

Example
-------
>>> w = Tensor([1.0, -2.0], requires_grad=True)
>>> with GradTape() as tape:
...     loss = (w * w).sum() / 2.0
>>> tape.backward(loss)
>>> w.grad
array([ 1., -2.], dtype=float32)
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from tervit.exceptions import ContractError, DimensionError

DEFAULT_DTYPE = np.float32

_GELU_C = math.sqrt(2.0 / math.pi)
_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "GradTape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """N-dimensional float array with an optional gradient buffer.

    ``data`` keeps the dtype it was created with when that dtype is floating
    point (float64 is used by gradient checks); everything else is converted
    to float32.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: GradTape | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operators --------------------------------------------------------
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


class GradTape:
    """Ordered record of executed operations, replayed in reverse by backward."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple, Callable]] = []

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse of nested tapes
            stack.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: tuple, vjp: Callable) -> None:
        out._tape = self
        self.records.append((out, inputs, vjp))

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("loss was not produced under this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        seen: dict[int, Tensor] = {id(loss): loss}
        for out, inputs, vjp in reversed(self.records):
            g = grads.get(id(out))
            if g is None:
                continue
            in_grads = vjp(g)
            for inp, gi in zip(inputs, in_grads):
                if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                gi = _unbroadcast(np.asarray(gi), inp.shape).astype(inp.dtype, copy=False)
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    seen[key] = inp
        for key, t in seen.items():
            if not t.requires_grad:
                continue
            g = grads[key]
            t.grad = g.copy() if t.grad is None else t.grad + g


def backward(loss: Tensor) -> None:
    """Backpropagate ``loss`` through the tape that produced it."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise ContractError("loss was not produced under an active GradTape")
    loss._tape.backward(loss)


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# -- plumbing ----------------------------------------------------------------


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def apply_op(out_data: np.ndarray, inputs: Sequence, vjp: Callable) -> Tensor:
    """Wrap ``out_data`` as a tensor and record ``vjp`` if anything needs grads.

    ``vjp(g)`` must return one gradient (or None) per entry of ``inputs``.
    Custom estimators such as the quantizers' straight-through rules are
    built with this.
    """
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, tuple(inputs), vjp)
    return out


def _data(x):
    return x.data if isinstance(x, Tensor) else x


def _result_dtype(*xs):
    dts = [x.dtype for x in xs if isinstance(x, Tensor)]
    return np.result_type(*dts) if dts else DEFAULT_DTYPE


# -- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    dt = _result_dtype(a, b)
    out = (_data(a) + _data(b)).astype(dt, copy=False)
    return apply_op(out, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    dt = _result_dtype(a, b)
    out = (_data(a) - _data(b)).astype(dt, copy=False)
    return apply_op(out, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    dt = _result_dtype(a, b)
    ad, bd = _data(a), _data(b)
    out = (ad * bd).astype(dt, copy=False)
    return apply_op(out, (a, b), lambda g: (g * bd, g * ad))


def div(a, b) -> Tensor:
    dt = _result_dtype(a, b)
    ad, bd = _data(a), _data(b)
    out = (ad / bd).astype(dt, copy=False)
    return apply_op(out, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)))


def square(x: Tensor) -> Tensor:
    return mul(x, x)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return apply_op(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return apply_op(np.log(xd), (x,), lambda g: (g / xd,))


def gelu(x: Tensor) -> Tensor:
    """GeLU, tanh approximation."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3.0 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return apply_op(out.astype(xd.dtype, copy=False), (x,), vjp)


# -- shape ops ---------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return apply_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return apply_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, tuple(axes))


def getitem(x: Tensor, index) -> Tensor:
    src_shape, dt = x.shape, x.dtype

    def vjp(g):
        full = np.zeros(src_shape, dtype=dt)
        np.add.at(full, index, g)
        return (full,)

    return apply_op(np.array(x.data[index]), (x,), vjp)


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return apply_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp)


def broadcast_to(x: Tensor, shape) -> Tensor:
    return apply_op(np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (g,))


# -- reductions --------------------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src),)

    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=x.dtype)
    return apply_op(out, (x,), vjp)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return div(tsum(x, axis=axis, keepdims=keepdims), float(count))


# -- linear algebra ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy's batching rules on leading dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return apply_op(ad @ bd, (a, b), vjp)


# -- normalisation and probabilities -------------------------------------------


def softmax_lastdim(x: Tensor) -> Tensor:
    xd = x.data
    z = np.exp(xd - xd.max(axis=-1, keepdims=True))
    y = z / z.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return apply_op(y, (x,), vjp)


def log_softmax_lastdim(x: Tensor) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def vjp(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return apply_op(out, (x,), vjp)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply ``gamma * xhat + beta``."""
    gamma, beta = as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layernorm affine params {gamma.shape}/{beta.shape} do not match last dim {d}"
        )
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv_std = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv_std
    out = xhat * gamma.data + beta.data
    lead = tuple(range(xd.ndim - 1))

    def vjp(g):
        dxhat = g * gamma.data
        dx = inv_std / d * (
            d * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return apply_op(out.astype(xd.dtype, copy=False), (x, gamma, beta), vjp)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits`` (B x C)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy expects (B, C) logits and (B,) labels, "
                             f"got {logits.shape} and {labels.shape}")
    z = logits.data
    shifted = z - z.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    rows = np.arange(z.shape[0])
    out = np.asarray(-logp[rows, labels].mean(), dtype=z.dtype)

    def vjp(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (g * grad / z.shape[0],)

    return apply_op(out, (logits,), vjp)

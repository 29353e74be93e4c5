"""Dense tensors with define-by-run reverse-mode differentiation.

Storage is a numpy array; the graph is an explicit append-only tape that is
rebuilt on every forward pass::

    with Tape() as tape:
        loss = cross_entropy(matmul(x, w), targets)
    tape.backward(loss)

Operations executed outside an active tape (or on inputs that do not require
gradients) are computed eagerly and not recorded.
"""

from __future__ import annotations

import contextvars
from typing import Callable, Sequence

import numpy as np

# Additive mask value. Finite so that every tensor stays finite, but far enough
# below any logit that exp() underflows to exactly 0 after max-subtraction.
NEG_FILL = -1e30


class DimensionError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("tape", default=None)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if arr.size == 0:
            raise DimensionError(f"tensor with empty shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite entries in tensor {name or ''} of shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self._tape is None:
            raise UsageError("backward() on a tensor that was not produced on a tape")
        self._tape.backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    # operator sugar, used mostly in tests
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("output", "inputs", "backward")

    def __init__(self, output: Tensor, inputs: Sequence[Tensor], backward: Callable):
        self.output = output
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Append-only record of operations for one forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._done = False
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def record(self, output: Tensor, inputs: Sequence[Tensor], backward: Callable) -> None:
        output.requires_grad = True
        output._tape = self
        self.nodes.append(_Node(output, tuple(inputs), backward))

    def backward(self, loss: Tensor) -> None:
        if loss._tape is not self:
            raise UsageError("loss was not recorded on this tape")
        if self._done:
            raise UsageError("backward() already ran on this tape; rebuild the forward pass")
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not np.isfinite(loss.data).all():
            raise NonFiniteError(f"non-finite loss {loss.data.reshape(-1)[0]}")
        self._done = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            g_inputs = node.backward(g_out)
            for inp, g in zip(node.inputs, g_inputs):
                if g is None or not inp.requires_grad:
                    continue
                if inp._tape is self:
                    key = id(inp)
                    if key in grads:
                        grads[key] = grads[key] + g
                    else:
                        grads[key] = g
                else:
                    # leaf parameter: accumulate into .grad
                    inp.grad = g.copy() if inp.grad is None else inp.grad + g


def current_tape() -> Tape | None:
    return _active_tape.get()


def _finish(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced ({backward.__qualname__.split('.')[0]})")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out.name = None
    out._tape = None
    tape = _active_tape.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, inputs, backward)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _finish(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _finish(out, (a, b), backward)


def scale(a: Tensor, factor: float) -> Tensor:
    out = a.data * a.data.dtype.type(factor)

    def backward(g):
        return (g * factor,)

    return _finish(out, (a,), backward)


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    out = np.where(keep, a.data, 0).astype(a.dtype, copy=False)

    def backward(g):
        return (g * keep,)

    return _finish(out, (a,), backward)


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rate == 0`` or no rng is supplied."""
    if rate <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / a.dtype.type(1.0 - rate)
    out = a.data * keep

    def backward(g):
        return (g * keep,)

    return _finish(out, (a,), backward)


def masked_fill(a: Tensor, mask: np.ndarray, value: float = NEG_FILL) -> Tensor:
    """Replace entries where ``mask`` is true (broadcast against ``a``) by ``value``."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    out = np.where(mask, a.dtype.type(value), a.data)

    def backward(g):
        return (np.where(mask, 0, g).astype(g.dtype, copy=False),)

    return _finish(out, (a,), backward)


def tensor_sum(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.dtype).reshape(1)

    def backward(g):
        return (np.broadcast_to(g.reshape(()), a.shape).copy(),)

    return _finish(out, (a,), backward)


# ---------------------------------------------------------------------------
# shape


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None

    def backward(g):
        return (g.reshape(a.shape),)

    return _finish(out, (a,), backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def backward(g):
        return (g.transpose(inverse),)

    return _finish(out, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of nothing")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise DimensionError(f"concat: incompatible shapes {shapes} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _finish(out, tensors, backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` may be 2-D and shared across the leading batch axes of ``a``; otherwise
    batch axes must match exactly.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ, {a.shape} x {b.shape}")
    if b.data.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch extents differ, {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.data.ndim == 2 and a.data.ndim > 2:
            lead = a.data.reshape(-1, a.shape[-1])
            gb = lead.T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _finish(out, (a, b), backward)


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; the backward pass scatters into the gathered rows."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding index out of range [0, {table.shape[0]}): min {ids.min()}, max {ids.max()}")
    out = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _finish(out, (table,), backward)


# ---------------------------------------------------------------------------
# normalisation


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.shape[axis] == 0:
        raise DimensionError(f"softmax over empty axis {axis} of {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _finish(y, (a,), backward)


def log_softmax_array(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    out = log_softmax_array(a.data, axis)

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _finish(out, (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        n = x.shape[-1]
        gxhat = g * gain.data
        gx = inv / n * (n * gxhat - gxhat.sum(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True))
        lead = g.reshape(-1, n)
        return gx, (lead * xhat.reshape(-1, n)).sum(axis=0), lead.sum(axis=0)

    return _finish(out, (x, gain, bias), backward)


def cross_entropy(logits: Tensor, targets, mask=None, weights=None) -> Tensor:
    """Negative log-likelihood of ``targets`` under ``softmax(logits)``.

    ``logits`` is ``[L, V]``. ``mask`` marks positions to *exclude* (padding).
    Without ``weights`` the result is the mean over kept positions; with
    ``weights`` it is the weighted sum over kept positions.
    """
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy wants [L, V] logits, got {logits.shape}")
    n, v = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (n,):
        raise DimensionError(f"cross_entropy: {n} logit rows but {targets.shape[0] if targets.ndim else 0} targets")
    if targets.size and (targets.max() >= v or targets.min() < 0):
        raise IndexError(f"target id {int(targets.max())} outside vocabulary of size {v}")
    keep = np.ones(n, dtype=bool) if mask is None else ~np.asarray(mask, dtype=bool)
    if weights is None:
        count = int(keep.sum())
        if count == 0:
            raise DimensionError("cross_entropy: every position is masked")
        w = keep / count
    else:
        w = np.asarray(weights, dtype=np.float64) * keep
    w = w.astype(logits.dtype)
    logp = log_softmax_array(logits.data, axis=-1)
    picked = logp[np.arange(n), targets]
    out = np.asarray(-(w * picked).sum(), dtype=logits.dtype).reshape(1)

    def backward(g):
        grad = np.exp(logp)
        grad[np.arange(n), targets] -= 1
        return (grad * (w * g.reshape(()))[:, None],)

    return _finish(out, (logits,), backward)

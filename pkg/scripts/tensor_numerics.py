#!/usr/bin/env python3
"""
tensor_numerics.py - Dense tensors with tape-based reverse-mode gradients

Just enough tensor math for the alternating-attention encoder: matmul, broadcasting
elementwise ops, softmax, layer normalization, tanh-GELU, reshape/transpose and
reductions. Values live in numpy arrays; every op is a plain function that computes
its output and, when a GradTape is recording and an input is tracked, records a
closure producing the input gradients.

Usage::

    from tensor_numerics import GradTape, Tensor, matmul, sum_all

    w = Tensor(np.ones((3, 2)), requires_grad=True, name="w")
    with GradTape() as tape:
        loss = sum_all(matmul(x, w))
    grads = tape.backward(loss)        # {"w": ndarray}

Precision: float32 by default. ``float64_mode()`` switches the default dtype used for
new tensors, which the gradient checks rely on.

Environment Variables:
    BPQ_DEBUG_NUMERICS - When "true", every op checks its output for NaN/Inf
"""

import contextlib
import math
from typing import Callable, Iterator, Mapping, Optional, Sequence, Union

import common
from common import ConfigError, ContractError, NumericError, ShapeError
import numpy as np

_default_dtype: type = np.float32


def default_dtype() -> type:
    return _default_dtype


@contextlib.contextmanager
def float64_mode() -> Iterator[None]:
    """Create new tensors in float64 inside the block (gradient checking)."""
    global _default_dtype
    previous = _default_dtype
    _default_dtype = np.float64
    try:
        yield
    finally:
        _default_dtype = previous


class Tensor:
    """A numpy array plus gradient bookkeeping.

    ``requires_grad`` marks a trainable leaf. ``tracked`` is true for trainable
    leaves and for every value computed from one under an active tape.
    """

    __slots__ = ("data", "requires_grad", "tracked", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: Optional[str] = None,
        dtype: Optional[type] = None,
    ):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None and isinstance(data, np.ndarray) and data.dtype.kind == "f":
            self.data = data
        else:
            self.data = np.asarray(data, dtype=dtype or _default_dtype)
        self.requires_grad = requires_grad
        self.tracked = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


TensorLike = Union[Tensor, np.ndarray, float, int]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: BackwardFn):
        self.out = out
        self.inputs = inputs
        self.backward = backward


_tape_stack: list["GradTape"] = []


class GradTape:
    """Records ops executed inside ``with GradTape():`` for one backward pass.

    Single-owner: a tape is consumed by ``backward`` and cannot be replayed.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._leaves: dict[int, Tensor] = {}
        self._consumed = False

    def __enter__(self) -> "GradTape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.remove(self)

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: BackwardFn) -> None:
        for t in inputs:
            if t.requires_grad:
                self._leaves.setdefault(id(t), t)
        out.tracked = True
        self._nodes.append(_Node(out, inputs, backward))

    def backward(
        self, loss: Tensor, params: Optional[Mapping[str, Tensor]] = None
    ) -> dict[str, np.ndarray]:
        """Reverse pass from a scalar ``loss``.

        Args:
            loss: Scalar tensor produced under this tape.
            params: Optional name -> tensor map. When given, every trainable entry
                gets a gradient (zeros if the loss does not depend on it) and frozen
                entries are omitted. Otherwise gradients are returned for the
                trainable leaves the tape saw, keyed by their names.

        Raises:
            ContractError: If loss is not scalar or the tape was already consumed.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._consumed:
            raise ContractError("GradTape already consumed by a backward pass")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self._nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.tracked:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi

        if params is None:
            return {
                (leaf.name or f"tensor{key}"): grads.get(key, np.zeros_like(leaf.data))
                for key, leaf in self._leaves.items()
            }
        return {
            name: grads.get(id(p), np.zeros_like(p.data))
            for name, p in params.items()
            if p.requires_grad
        }


def backward(
    tape: GradTape, loss: Tensor, params: Optional[Mapping[str, Tensor]] = None
) -> dict[str, np.ndarray]:
    return tape.backward(loss, params)


def _active_tape() -> Optional[GradTape]:
    return _tape_stack[-1] if _tape_stack else None


def _as_tensor(x: TensorLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or _default_dtype))


def _pair(a: TensorLike, b: TensorLike) -> tuple[Tensor, Tensor]:
    """Wrap constants in the dtype of the tensor operand."""
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    return a, _as_tensor(b, a)


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
    if common.DEBUG_NUMERICS and not np.isfinite(data).all():
        raise NumericError("Non-finite value produced by tensor op")
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(t.tracked for t in inputs):
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _pair(a, b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit(a.data + b.data, (a, b), _backward)


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _pair(a, b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit(a.data - b.data, (a, b), _backward)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _pair(a, b)

    def _backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit(a.data * b.data, (a, b), _backward)


def square(x: Tensor) -> Tensor:
    def _backward(g):
        return (2 * g * x.data,)

    return _emit(x.data * x.data, (x,), _backward)


def where(mask: np.ndarray, a: TensorLike, b: TensorLike) -> Tensor:
    """Select ``a`` where ``mask`` is true, else ``b`` (mask is not differentiated)."""
    a, b = _pair(a, b)
    mask = np.asarray(mask, dtype=bool)

    def _backward(g):
        return _unbroadcast(np.where(mask, g, 0), a.shape), _unbroadcast(
            np.where(mask, 0, g), b.shape
        )

    return _emit(np.where(mask, a.data, b.data), (a, b), _backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    inner = _GELU_C * (x.data + 0.044715 * x.data**3)
    t = np.tanh(inner)

    def _backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x.data**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * d_inner),)

    return _emit(0.5 * x.data * (1.0 + t), (x,), _backward)


# ---------------------------------------------------------------------------
# Linear algebra and shape
# ---------------------------------------------------------------------------


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading (batch) axes.

    Raises:
        ShapeError: If the inner extents differ.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def _backward(g):
        if b.ndim == 2:
            k, n = b.shape
            ga = g @ b.data.T
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            return _unbroadcast(ga, a.shape), gb
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit(np.matmul(a.data, b.data), (a, b), _backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    def _backward(g):
        return (g.reshape(x.shape),)

    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from exc
    return _emit(data, (x,), _backward)


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))

    def _backward(g):
        return (np.transpose(g, inverse),)

    return _emit(np.transpose(x.data, axes), (x,), _backward)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    def _backward(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _emit(np.asarray(x.data.sum(), dtype=x.dtype), (x,), _backward)


def mean(x: Tensor, axis: Union[int, tuple[int, ...], None] = None, keepdims: bool = False):
    axes = tuple(range(x.ndim)) if axis is None else (axis if isinstance(axis, tuple) else (axis,))
    axes = tuple(a % x.ndim for a in axes)
    count = int(np.prod([x.shape[a] for a in axes]))

    def _backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).astype(x.dtype),)

    data = np.asarray(x.data.mean(axis=axes, keepdims=keepdims), dtype=x.dtype)
    return _emit(data, (x,), _backward)


# ---------------------------------------------------------------------------
# Normalization and attention helpers
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def _backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit(y, (x,), _backward)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gain`` and ``bias``.

    Raises:
        ConfigError: If eps is not positive.
    """
    if not eps > 0:
        raise ConfigError(f"layernorm eps must be > 0, got {eps}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_sigma = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_sigma

    def _backward(g):
        gxhat = g * gain.data
        gx = inv_sigma * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    out = (xhat * gain.data + bias.data).astype(x.dtype, copy=False)
    return _emit(out, (x, gain, bias), _backward)

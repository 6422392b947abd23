"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Only the operators needed by the backbone, the evidence head and the losses
are provided. Operations are recorded on the innermost active :class:`Tape`
(thread-local) whenever at least one input requires a gradient; with no
active tape everything runs as plain numpy, which is what evaluation uses.

    >>> x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_(mul(x, x))
    >>> backward(loss)
    >>> x.grad
    array([2., 4., 6.])
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5

_local = threading.local()


class DimensionError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    """Dense array node. ``grad`` is populated by :func:`backward`."""

    __slots__ = ("data", "requires_grad", "grad", "tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape: Tape | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # The model code calls the functional forms; these are conveniences for tests.
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Op:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class Tape:
    """Ordered record of operations; inputs always precede their consumers."""

    def __init__(self):
        self.ops: list[_Op] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def record(self, inputs, output, rule) -> None:
        output.tape = self
        self.ops.append(_Op(tuple(inputs), output, rule))

    def __len__(self) -> int:
        return len(self.ops)


def _stack() -> list[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(out: np.ndarray, inputs: Sequence[Tensor], rule) -> Tensor:
    node = Tensor(out)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        node.requires_grad = True
        tape.record(inputs, node, rule)
    return node


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python constant."""
    c = a.data.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def shift(a: Tensor, c: float) -> Tensor:
    """Add a Python constant."""
    return _make(a.data + a.data.dtype.type(c), (a,), lambda g: (g,))


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # Split branches so large |x| never overflows exp.
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype, copy=False)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # Subgradient 0 at the kink.
    return _make(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    xd = x.data
    c = xd.dtype.type(_GELU_C)
    k = xd.dtype.type(0.044715)
    inner = c * (xd + k * xd**3)
    th = np.tanh(inner)
    out = 0.5 * xd * (1.0 + th)

    def rule(g):
        dinner = c * (1.0 + 3.0 * k * xd**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th**2) * dinner),)

    return _make(out, (x,), rule)


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


# ---------------------------------------------------------------- reductions


def sum_(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (x,), rule)


def mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return scale(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, batched over matching leading dimensions."""
    if a.data.ndim < 1 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def rule(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if ad.ndim == 1:
            gb = np.outer(ad, g) if g.ndim == 1 else np.swapaxes(ad[None], -1, -2) @ g
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(out, (a, b), rule)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    orig = x.shape
    return _make(x.data.reshape(tuple(shape)), (x,), lambda g: (g.reshape(orig),))


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Broadcast ``x`` to ``shape`` (materialized)."""
    orig = x.shape
    out = np.broadcast_to(x.data, tuple(shape)).copy()
    return _make(out, (x,), lambda g: (_unbroadcast(g, orig),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    ref = xs[0].shape
    ax = axis % len(ref)
    for t in xs[1:]:
        if len(t.shape) != len(ref) or any(
            i != ax and p != q for i, (p, q) in enumerate(zip(t.shape, ref))
        ):
            raise DimensionError(f"concat: incompatible shapes {ref} and {t.shape}")
    sizes = [t.shape[ax] for t in xs]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in xs], axis=ax)
    return _make(out, xs, lambda g: tuple(np.split(g, bounds, axis=ax)))


def slice_(x: Tensor, index) -> Tensor:
    """Basic (non-fancy) indexing, e.g. ``slice_(h, (..., 0, slice(None)))``."""
    shape, dtype = x.shape, x.dtype

    def rule(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _make(np.array(x.data[index]), (x,), rule)


def take(x: Tensor, index: int, axis: int = -1) -> Tensor:
    """Select one entry along ``axis`` (drops that axis)."""
    idx = [slice(None)] * x.data.ndim
    idx[axis] = index
    return slice_(x, tuple(idx))


def broadcast_scale(w: Tensor, x: Tensor) -> Tensor:
    """Scale the rows of ``x`` (..., N, d) by ``w`` (..., N)."""
    if w.shape != x.shape[:-1]:
        raise DimensionError(f"broadcast_scale: weights {w.shape} do not match rows of {x.shape}")
    wd, xd = w.data, x.data
    return _make(
        wd[..., None] * xd,
        (w, x),
        lambda g: ((g * xd).sum(axis=-1), g * wd[..., None]),
    )


# ---------------------------------------------------------------- normalization


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), rule)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis, then apply ``gain`` and ``bias``."""
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise DimensionError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs input {x.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def rule(g):
        gx = g * gd
        n = xd.shape[-1]
        dx = inv / n * (n * gx - gx.sum(axis=-1, keepdims=True) - xhat * (gx * xhat).sum(axis=-1, keepdims=True))
        return dx, _unbroadcast(g * xhat, gd.shape), _unbroadcast(g, gd.shape)

    return _make(out, (x, gain, bias), rule)


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """``-log softmax(logits)[label]`` for a single logit vector."""
    if logits.data.ndim != 1:
        raise DimensionError(f"cross_entropy expects a 1-D logit vector, got {logits.shape}")
    n = logits.shape[0]
    if not 0 <= int(label) < n:
        raise ValueError(f"label {label} out of range for {n} classes")
    ld = logits.data
    m = ld.max()
    lse = m + np.log(np.exp(ld - m).sum())
    out = np.asarray(lse - ld[label])
    p = np.exp(ld - lse)

    def rule(g):
        d = p.copy()
        d[label] -= 1.0
        return (g * d,)

    return _make(out, (logits,), rule)


# ---------------------------------------------------------------- backward


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every node of ``loss``'s tape that requires grad."""
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    if tape is None:
        raise TapeError("backward called on a node that is not recorded on any tape")
    if tape.consumed:
        raise TapeError("backward already ran on this tape; build a new tape")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for op in reversed(tape.ops):
        g = grads.pop(id(op.output), None)
        if g is None:
            continue
        op.output.grad = g
        for inp, gi in zip(op.inputs, op.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    # Whatever is left are leaves (parameters and inputs).
    leaf_ids = grads
    for op in tape.ops:
        for inp in op.inputs:
            g = leaf_ids.get(id(inp))
            if g is not None and inp.requires_grad:
                inp.grad = g if inp.grad is None else inp.grad + g
                leaf_ids.pop(id(inp))

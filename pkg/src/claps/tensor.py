"""A small dense tensor engine with tape-based reverse-mode gradients.

Only the operations the model needs are provided.  Every primitive records
itself on the active :class:`GradTape` (if any input is tracked) together
with a closure mapping the output gradient to input gradients.  Replaying
the tape in reverse visits each primitive exactly once.

Usage::

    with GradTape() as tape:
        loss = f(params)
    grads = tape.gradient(loss, params)
"""
from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels

_state = threading.local()


def _tape_stack() -> list["GradTape"]:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def _active_tape() -> "GradTape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense float array plus gradient-tracking metadata."""

    __slots__ = ("data", "requires_grad", "name", "_tracked")
    __array_priority__ = 100.0
    __array_ufunc__ = None  # ndarray (op) Tensor defers to the Tensor operators

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self._tracked = requires_grad

    # -- convenience ------------------------------------------------------
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
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class GradTape:
    """Ordered record of primitive applications on one thread.

    A tape is a context manager; nested tapes are allowed and only the
    innermost one records.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        self._records.append((out, inputs, backward))

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of scalar ``target`` w.r.t. each of ``sources``.

        Sources the target does not depend on get exact zeros.
        """
        if target.data.size != 1:
            raise ValueError(f"gradient target must be scalar, got shape {target.shape}")
        grads: dict[int, np.ndarray] = {id(target): np.ones_like(target.data)}
        for out, inputs, backward in reversed(self._records):
            g = grads.get(id(out))
            if g is None:
                continue
            for t, gi in zip(inputs, backward(g)):
                if gi is None or not t._tracked:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return [
            np.array(grads[id(s)], dtype=np.float64).reshape(s.shape)
            if id(s) in grads
            else np.zeros_like(s.data)
            for s in sources
        ]


def _make(out_data: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(t._tracked for t in inputs):
        out._tracked = True
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
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
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data
    return _make(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)))


def minimum(a, b) -> Tensor:
    """Elementwise min; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data
    return _make(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# unary maps
# ---------------------------------------------------------------------------

def relu(x) -> Tensor:
    """max(x, 0); the subgradient at 0 is 0."""
    x = as_tensor(x)
    on = x.data > 0
    return _make(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,))


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid_np(np.atleast_1d(x.data)).reshape(x.shape)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def log_sigmoid(x) -> Tensor:
    """Stable log(sigmoid(x))."""
    x = as_tensor(x)
    d = x.data
    out = np.minimum(d, 0.0) - np.log1p(np.exp(-np.abs(d)))
    s = _sigmoid_np(np.atleast_1d(d)).reshape(d.shape)
    return _make(out, (x,), lambda g: (g * (1.0 - s),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.data)
    return _make(e, (x,), lambda g: (g * e,))


def log(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    return _make(np.log(d), (x,), lambda g: (g / d,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    r = np.sqrt(x.data)
    return _make(r, (x,), lambda g: (g * 0.5 / r,))


def tabs(x) -> Tensor:
    x = as_tensor(x)
    sgn = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * sgn,))


def square(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    return _make(d * d, (x,), lambda g: (2.0 * g * d,))


# ---------------------------------------------------------------------------
# reductions and shape plumbing
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(x.data.sum(axis=axes, keepdims=keepdims), (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return tsum(x, axis, keepdims) * (1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swap_last(x) -> Tensor:
    nd = as_tensor(x).ndim
    axes = list(range(nd))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(x.data[index], (x,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    ax = axis % max(ts[0].ndim, 1)
    sizes = [t.shape[ax] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _make(np.concatenate([t.data for t in ts], axis=ax), ts, backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    return concat([reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):])
                   for t in ts], axis=axis)


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _make(np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (_unbroadcast(g, old),))


# ---------------------------------------------------------------------------
# the operations the model equations name
# ---------------------------------------------------------------------------

def conv2d(x, weight, bias) -> Tensor:
    """Stride-1 'same' convolution, kernel size 1 or 3.

    Shapes: x (N, C, H, W), weight (Cout, C, k, k), bias (Cout,).
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 4:
        raise ValueError(f"conv2d input must be (N,C,H,W), got shape {x.shape}")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ValueError(f"conv2d weight must be (Cout,C,k,k), got shape {weight.shape}")
    k = weight.shape[2]
    if k not in (1, 3):
        raise ValueError(f"conv2d kernel size must be 1 or 3, got {k}")
    if weight.shape[1] != x.shape[1]:
        raise ValueError(
            f"conv2d channel mismatch: input axis 1 (C) = {x.shape[1]} but weight axis 1 = {weight.shape[1]}")
    if bias.shape != (weight.shape[0],):
        raise ValueError(
            f"conv2d bias shape {bias.shape} does not match weight axis 0 (Cout) = {weight.shape[0]}")
    xd, wd = x.data, weight.data
    out = _kernels.conv2d_forward(xd, wd, bias.data)

    def backward(g):
        return _kernels.conv2d_backward(xd, wd, g)

    return _make(out, (x, weight, bias), backward)


def softmax_last(x) -> Tensor:
    """Softmax over the last axis."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (x,), backward)


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(
            f"matmul inner dimension mismatch: a axis -1 = {a.shape[-1]}, b axis -2 = {b.shape[-2]}")
    lead_a, lead_b = a.shape[:-2], b.shape[:-2]
    if lead_a and lead_b and lead_a != lead_b:
        raise ValueError(f"matmul batch extents disagree: {lead_a} vs {lead_b}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), backward)


def concat_seq(a, b) -> Tensor:
    """Concatenate token sequences (..., La, d) and (..., Lb, d) along length."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"concat_seq feature dims differ: {a.shape[-1]} vs {b.shape[-1]}")
    return concat([a, b], axis=-2)


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

class GradCheckError(ArithmeticError):
    """Raised when the checked function is non-finite at a probe point."""

    def __init__(self, message: str, param_index: int, coord: int):
        super().__init__(message)
        self.param_index = param_index
        self.coord = coord


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
               max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` must rebuild the graph from the current ``params`` data on each
    call.  The error at a coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    ``max_coords`` caps the probed coordinates per parameter (sampled with
    ``rng``); by default every coordinate is probed.
    """
    params = list(params)
    with GradTape() as tape:
        out = f()
    base = out.item()
    if not math.isfinite(base):
        raise GradCheckError("function is non-finite at the base point", -1, -1)
    analytic = tape.gradient(out, params)
    worst = 0.0
    for pi, (p, ga) in enumerate(zip(params, analytic)):
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        coords: Iterable[int] = range(flat.size)
        if max_coords is not None and flat.size > max_coords:
            rng = rng or np.random.default_rng(0)
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        ga = ga.reshape(-1)
        for i in coords:
            old = flat[i]
            flat[i] = old + h
            fp = f().item()
            flat[i] = old - h
            fm = f().item()
            flat[i] = old
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise GradCheckError(
                    f"non-finite value probing parameter {pi} coordinate {i}", pi, int(i))
            num = (fp - fm) / (2.0 * h)
            err = abs(ga[i] - num) / max(1.0, abs(num))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------

def uniform_param(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
                  name: str | None = None) -> Tensor:
    """Trainable tensor drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def zeros_param(shape: tuple[int, ...], name: str | None = None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


class ParamGroup:
    """Mixin for dataclasses whose fields are Tensors or nested groups."""

    def named_parameters(self, prefix: str = ""):
        from dataclasses import fields

        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, Tensor) and v.requires_grad:
                yield prefix + f.name, v
            elif isinstance(v, ParamGroup):
                yield from v.named_parameters(prefix + f.name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

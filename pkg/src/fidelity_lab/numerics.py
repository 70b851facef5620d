"""Dense float64 arrays with tape-based reverse-mode differentiation.

Usage::

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with GradTape() as tape:
        loss = (x @ w).square().mean()
    (gw,) = tape.gradient(loss, [w])

Tensors are immutable; every op returns a new Tensor. Ops executed while a
tape is active are recorded only if at least one input is being tracked.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "NonFiniteError",
    "as_tensor",
    "matmul",
    "softmax_rows",
    "sigmoid",
    "softplus",
    "concat",
    "stack",
    "layer_norm",
    "grad_check",
    "Adam",
    "SGD",
]

# NaN/Inf checks at op boundaries; disabled under ``python -O``.
CHECK_FINITE = __debug__


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf while finiteness checks are on."""


_local = threading.local()


def _active_tape() -> "GradTape | None":
    return getattr(_local, "tape", None)


class Tensor:
    __slots__ = ("data", "requires_grad", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        return t

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return reduce_sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return reduce_mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
    def transpose(self, *axes): return transpose(self, axes if axes else None)
    def square(self): return mul(self, self)
    def exp(self): return exp(self)
    def log(self): return log(self)
    def tanh(self): return tanh(self)
    def relu(self): return relu(self)
    def sqrt(self): return sqrt(self)

    @property
    def T(self): return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class GradTape:
    """Records differentiable ops for a single backward pass.

    Only one tape may be active per thread. Parameters are tracked if they
    were created with ``requires_grad=True`` or passed to :meth:`watch`.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._tracked: set[int] = set()
        self._keep: list[Tensor] = []
        self._used = False

    def __enter__(self) -> "GradTape":
        if _active_tape() is not None:
            raise RuntimeError("nested GradTape is not supported")
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = None

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            self._tracked.add(id(t))
            self._keep.append(t)

    def _is_tracked(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._tracked

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        self._tracked.add(id(out))
        # keep ids stable for the tape's lifetime
        self._keep.append(out)
        self._nodes.append((out, inputs, vjp))

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of scalar ``target`` w.r.t. each source (zeros if unused)."""
        if self._used:
            raise RuntimeError("GradTape.gradient may only be called once")
        self._used = True
        if target.data.size != 1:
            raise ValueError(f"target must be scalar, got shape {target.shape}")
        grads: dict[int, np.ndarray] = {id(target): np.ones_like(target.data)}
        for out, inputs, vjp in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = vjp(g)
            for inp, ig in zip(inputs, in_grads):
                if ig is None or not self._is_tracked(inp):
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
        result = []
        for s in sources:
            g = grads.get(id(s))
            result.append(np.zeros_like(s.data) if g is None else np.asarray(g, dtype=np.float64))
        return result


def _check(arr: np.ndarray, name: str) -> None:
    if CHECK_FINITE and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {name}")


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable, name: str) -> Tensor:
    _check(data, name)
    out = Tensor._wrap(data)
    tape = _active_tape()
    if tape is not None and any(tape._is_tracked(t) for t in inputs):
        tape._record(out, inputs, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise binary ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)),
                 "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


# unary ops

def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # exp of -|x| never overflows
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x):
    """Logistic function; accepts floats, arrays, or Tensors."""
    if not isinstance(x, Tensor):
        arr = np.asarray(x, dtype=np.float64)
        out = _sigmoid_np(arr)
        return float(out) if out.ndim == 0 else out
    out = _sigmoid_np(x.data)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a) -> Tensor:
    """log(1 + exp(a)), stable for large |a|."""
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    return _make(out, (a,), lambda g: (g * _sigmoid_np(a.data),), "softplus")


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid_np(a.data)
    return _make(a.data * s, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),), "silu")


# shape ops

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs ≥2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(np.matmul(a.data, b.data), (a, b), vjp, "matmul")


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), vjp, "sum")


def reduce_mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return reduce_sum(a, axis, keepdims) * (1.0 / float(n))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.asarray(a.data[idx]), (a,), vjp, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, vjp, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if axis < 0:
        axis += ts[0].ndim + 1
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in ts], axis=axis)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g: (_unbroadcast(g, a.shape),), "broadcast_to")


# composite / fused ops

def softmax_rows(x, temperature: float = 1.0):
    """Softmax along the last axis of ``x / temperature``.

    Works on Tensors (differentiable) or plain arrays.
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    raw = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if math.isinf(temperature):
        out = np.full_like(raw, 1.0 / raw.shape[-1])
    else:
        z = raw / temperature
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        out = e / e.sum(axis=-1, keepdims=True)
    if not isinstance(x, Tensor):
        return out

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot) / temperature,)

    return _make(out, (x,), vjp, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / sqrt(var + eps) * gain + bias


def grad_check(f: Callable[[Tensor], Tensor], params, eps: float = 1e-5) -> float:
    """Worst componentwise relative error between tape and central-difference gradients.

    The denominator is ``max(|analytic|, |numeric|, 1e-8)``.
    """
    p0 = np.array(params.data if isinstance(params, Tensor) else params, dtype=np.float64)
    p = Tensor(p0, requires_grad=True)
    with GradTape() as tape:
        y = f(p)
    if not np.all(np.isfinite(y.data)):
        raise NonFiniteError("function is not finite at params")
    if not tape._is_tracked(y):
        analytic = np.zeros_like(p0)
    else:
        (analytic,) = tape.gradient(y, [p])

    numeric = np.zeros_like(p0)
    flat = p0.reshape(-1)
    for i in range(flat.size):
        hi, lo = flat.copy(), flat.copy()
        hi[i] += eps
        lo[i] -= eps
        fh = f(Tensor(hi.reshape(p0.shape))).item()
        fl = f(Tensor(lo.reshape(p0.shape))).item()
        if not (math.isfinite(fh) and math.isfinite(fl)):
            raise NonFiniteError("function is not finite near params")
        numeric.reshape(-1)[i] = (fh - fl) / (2.0 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


class SGD:
    def __init__(self, params: Iterable[Tensor], lr: float):
        self.params = list(params)
        self.lr = lr

    def step(self, grads: Sequence[np.ndarray]) -> list[Tensor]:
        self.params = [Tensor(p.data - self.lr * g, requires_grad=True)
                       for p, g in zip(self.params, grads)]
        return self.params


class Adam:
    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, grad_clip: float | None = None):
        self.params = list(params)
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.grad_clip = grad_clip
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> list[Tensor]:
        if self.grad_clip is not None:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if norm > self.grad_clip:
                grads = [g * (self.grad_clip / norm) for g in grads]
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        new = []
        for i, (p, g) in enumerate(zip(self.params, grads)):
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            upd = self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            new.append(Tensor(p.data - upd, requires_grad=True))
        self.params = new
        return new

"""Dense array core with tape-based reverse-mode differentiation.

Only the handful of operations needed by the transceiver are provided.
Every op returns a new :class:`Tensor`; gradients are accumulated by
:meth:`Tensor.backward` in reverse topological order.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping

import numpy as np

TAGS = ("semantic_enc", "jsc_enc", "jsc_dec", "semantic_dec", "importance")


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up in a value or gradient."""


class ShapeError(ValueError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """An array value plus the bookkeeping needed to backpropagate into it."""

    __array_priority__ = 100.0
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, value, requires_grad: bool = False, _parents=(), _backward=None, op: str = "leaf"):
        self.value = np.asarray(value, dtype=np.float64) if not isinstance(value, np.ndarray) else value
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.grad: np.ndarray | None = None
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape})"

    def numpy(self) -> np.ndarray:
        return self.value

    def backward(self, seed: np.ndarray | None = None) -> None:
        if seed is None:
            if self.value.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            seed = np.ones_like(self.value)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        for node in order:
            node.grad = None
        self.grad = np.asarray(seed, dtype=self.value.dtype)
        for node in reversed(order):
            if not np.all(np.isfinite(node.value)):
                raise NonFiniteError(f"non-finite value produced by op '{node.op}'")
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=parent.value.dtype, copy=True)
                else:
                    parent.grad = parent.grad + g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(value, parents, backward, op):
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(value, True, parents, backward, op)
    return Tensor(value, False, (), None, op)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value + b.value

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), back, "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.value, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value * b.value

    def back(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _make(out, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value / b.value

    def back(g):
        ga = g / b.value
        gb = -g * a.value / (b.value * b.value)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), back, "div")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if av.shape[-1] != bv.shape[0 if bv.ndim == 1 else -2]:
        raise ShapeError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")
    out = av @ bv

    def back(g):
        a2 = av[None, :] if av.ndim == 1 else av
        b2 = bv[:, None] if bv.ndim == 1 else bv
        g2 = g
        if av.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bv.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = g2 @ np.swapaxes(b2, -1, -2)
        gb = np.swapaxes(a2, -1, -2) @ g2
        if av.ndim == 1:
            ga = ga[..., 0, :]
        if bv.ndim == 1:
            gb = gb[..., 0]
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _make(out, (a, b), back, "matmul")


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(out, (a,), back, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    count = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inverse = np.argsort(axes)
    return _make(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def index(a: Tensor, key) -> Tensor:
    """Basic or advanced indexing; the backward pass scatter-adds."""

    def back(g):
        full = np.zeros_like(a.value)
        np.add.at(full, key, g)
        return (full,)

    return _make(a.value[key], (a,), back, "index")


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.value for p in parts], axis=axis)
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, parts, back, "concat")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor, floor: float = 0.0) -> Tensor:
    v = np.maximum(a.value, floor) if floor > 0 else a.value
    return _make(np.log(v), (a,), lambda g: (g / v * (a.value >= floor),), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.value)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def square(a: Tensor) -> Tensor:
    return _make(a.value * a.value, (a,), lambda g: (2.0 * g * a.value,), "square")


def absolute(a: Tensor) -> Tensor:
    return _make(np.abs(a.value), (a,), lambda g: (g * np.sign(a.value),), "abs")


def relu(a: Tensor) -> Tensor:
    return _make(np.maximum(a.value, 0.0), (a,), lambda g: (g * (a.value > 0),), "relu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.value)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.value)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def straight_through(hard: np.ndarray, surrogate: Tensor, surrogate_grad: np.ndarray) -> Tensor:
    """Forward value ``hard``; backward multiplies by ``surrogate_grad``."""
    return _make(np.asarray(hard, dtype=surrogate.value.dtype), (surrogate,),
                 lambda g: (g * surrogate_grad,), "straight_through")


def softmax_values(v: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = v - v.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(v, axis: int = -1) -> Tensor:
    v = as_tensor(v)
    p = softmax_values(v.value, axis)

    def back(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, (v,), back, "softmax")


def log_softmax(v, axis: int = -1) -> Tensor:
    v = as_tensor(v)
    shifted = v.value - v.value.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (v,), back, "log_softmax")


LN_EPS = 1e-5


def layer_norm(x, gain, shift, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis, then apply ``gain`` and ``shift``."""
    x, gain, shift = as_tensor(x), as_tensor(gain), as_tensor(shift)
    mu = x.value.mean(axis=-1, keepdims=True)
    xc = x.value - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.value + shift.value

    def back(g):
        gx_hat = g * gain.value
        d = x.shape[-1]
        gx = inv / d * (d * gx_hat - gx_hat.sum(-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, shift.shape)

    return _make(out, (x, gain, shift), back, "layer_norm")


def dense_apply(x, weights, bias) -> Tensor:
    """``y = W x + b`` with ``W`` stored as ``[d_out, d_in]``; leading axes of x batch."""
    x, weights, bias = as_tensor(x), as_tensor(weights), as_tensor(bias)
    if weights.ndim != 2 or x.shape[-1] != weights.shape[1] or bias.shape != (weights.shape[0],):
        raise ShapeError(f"dense_apply: x{x.shape} W{weights.shape} b{bias.shape}")
    return matmul(x, transpose(weights)) + bias


def attention(queries, keys, values, heads: int, mix=None, key_mask=None) -> Tensor:
    """Multi-head scaled dot-product attention over already-projected inputs.

    ``queries`` is ``[..., n, d]``, ``keys``/``values`` are ``[..., m, d]``.
    ``mix`` is the ``[d, d]`` output mixing matrix (identity when omitted);
    ``key_mask`` (``[..., m]``, 1 = attend) blocks padded keys.
    """
    queries, keys, values = as_tensor(queries), as_tensor(keys), as_tensor(values)
    d = queries.shape[-1]
    if keys.shape[-1] != d or values.shape[-1] != d or keys.shape[-2] != values.shape[-2]:
        raise ShapeError("attention: inconsistent query/key/value shapes")
    if d % heads:
        raise ShapeError(f"width {d} not divisible by {heads} heads")
    dh = d // heads

    def split(t):
        t = t.reshape(t.shape[:-1] + (heads, dh))
        return swapaxes(t, -2, -3)

    q, k, v = split(queries), split(keys), split(values)
    scores = matmul(q, swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
    if key_mask is not None:
        block = np.where(np.asarray(key_mask) > 0, 0.0, -1e9)
        scores = scores + block[..., None, None, :]
    weights = softmax(scores, axis=-1)
    out = swapaxes(matmul(weights, v), -2, -3)
    out = out.reshape(out.shape[:-2] + (d,))
    if mix is not None:
        out = matmul(out, transpose(as_tensor(mix)))
    return out


# ---------------------------------------------------------------------------
# parameters


class ParameterSet:
    """Ordered named arrays, each tagged with the sub-network that owns it."""

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._tags: dict[str, str] = {}

    def add(self, name: str, value: np.ndarray, tag: str) -> None:
        if name in self._values:
            raise KeyError(f"duplicate parameter {name!r}")
        if tag not in TAGS:
            raise ValueError(f"unknown component tag {tag!r}")
        self._values[name] = np.array(value, dtype=np.float64)
        self._tags[name] = tag

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        old = self._values[name]
        value = np.asarray(value, dtype=old.dtype)
        if value.shape != old.shape:
            raise ShapeError(f"{name}: shape {value.shape} != {old.shape}")
        self._values[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __iter__(self):
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def items(self):
        return self._values.items()

    def tag(self, name: str) -> str:
        return self._tags[name]

    def names(self, tags: Iterable[str] | None = None) -> list[str]:
        if tags is None:
            return list(self._values)
        tags = set(tags)
        return [n for n in self._values if self._tags[n] in tags]

    def copy(self) -> "ParameterSet":
        new = ParameterSet()
        for n, v in self._values.items():
            new._values[n] = v.copy()
            new._tags[n] = self._tags[n]
        return new

    def merge(self, other: "ParameterSet") -> None:
        for n, v in other.items():
            self.add(n, v, other.tag(n))

    def round_to_single(self) -> None:
        """Quantize every value to float32 precision (still stored as float64)."""
        for n, v in self._values.items():
            self._values[n] = v.astype(np.float32).astype(np.float64)

    def tensors(self, trainable: Iterable[str] = ()) -> dict[str, Tensor]:
        trainable = set(trainable)
        return {n: Tensor(v, requires_grad=n in trainable) for n, v in self._values.items()}

    def size(self) -> int:
        return int(sum(v.size for v in self._values.values()))


def glorot(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    fan_out, fan_in = (shape[0], shape[-1]) if len(shape) > 1 else (shape[0], shape[0])
    return rng.normal(0.0, math.sqrt(2.0 / (fan_in + fan_out)), size=shape)


LossFn = Callable[[Mapping[str, Tensor]], Tensor]


def value_and_grad(loss: LossFn, params: ParameterSet, names: Iterable[str] | None = None):
    names = list(params.names() if names is None else names)
    tensors = params.tensors(names)
    out = loss(tensors)
    if out.value.size != 1:
        raise ShapeError("loss must be a scalar")
    if not np.isfinite(out.value).all():
        raise NonFiniteError("loss is not finite")
    out.backward()
    grads = {}
    for n in names:
        g = tensors[n].grad
        g = np.zeros_like(params[n]) if g is None else g
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {n}")
        grads[n] = g
    return float(out.value), grads


def grad(loss: LossFn, params: ParameterSet, names: Iterable[str] | None = None) -> dict[str, np.ndarray]:
    """Reverse-mode gradient of a scalar ``loss`` with respect to ``params``."""
    return value_and_grad(loss, params, names)[1]


def finite_diff_check(loss: LossFn, params: ParameterSet, step: float = 1e-5,
                      names: Iterable[str] | None = None, grads: Mapping[str, np.ndarray] | None = None,
                      max_per_param: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Largest relative error between ``grads`` (reverse mode by default) and central differences.

    ``max_per_param`` limits the check to a random subset of entries in each array.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    names = list(params.names() if names is None else names)
    if grads is None:
        grads = grad(loss, params, names)
    rng = rng or np.random.default_rng(0)

    def evaluate() -> float:
        return float(loss(params.tensors()).value)

    worst = 0.0
    for n in names:
        arr = params[n]
        flat_idx = np.arange(arr.size)
        if max_per_param is not None and arr.size > max_per_param:
            flat_idx = rng.choice(arr.size, size=max_per_param, replace=False)
        for i in flat_idx:
            pos = np.unravel_index(i, arr.shape)
            orig = arr[pos]
            arr[pos] = orig + step
            up = evaluate()
            arr[pos] = orig - step
            down = evaluate()
            arr[pos] = orig
            numeric = (up - down) / (2.0 * step)
            analytic = float(grads[n][pos])
            denom = max(abs(numeric), abs(analytic), 1e-8)
            worst = max(worst, abs(numeric - analytic) / denom)
    return worst

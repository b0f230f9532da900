"""Minimal reverse-mode autodiff over float64 numpy arrays.

Everything is eager: each op computes its value immediately and records a
backward closure on the result node. Graphs are built per loss evaluation and
released after backward(). Just enough ops for small MLPs plus the coupling /
KL arithmetic used by the training objectives. All math is float64.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

__all__ = [
    "Var", "as_var", "add", "sub", "mul", "div", "neg", "exp", "log",
    "matmul", "vsum", "mean", "softmax", "sigmoid", "softplus", "gelu", "clamp",
    "minimum", "maximum", "gather", "concat", "reshape", "broadcast_to",
    "stop_grad", "onehot", "AdamW", "global_grad_norm", "clip_grads_",
]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Var:
    """A value in the computation graph.

    ``value`` is a float64 ndarray, ``grad`` is allocated lazily by
    backward(). Leaves (parameters, constants) have no parents.
    """

    __slots__ = ("value", "grad", "_parents", "_backward", "_freed")

    def __init__(self, value, _parents=(), _backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self._freed = False

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    def backward(self, free: bool = True):
        """Accumulate d(self)/d(leaf) into .grad of every reachable node.

        The root must hold a single scalar. Gradients accumulate across
        separate backward calls until zeroed. With ``free=True`` (default)
        the tape is released afterwards; a freed graph cannot be replayed.
        """
        if self.value.size != 1:
            raise ValueError(
                f"backward requires a scalar root, got shape {self.value.shape}"
            )
        if self._freed:
            raise RuntimeError("backward on a freed tape")

        topo: list[Var] = []
        seen: set[int] = set()
        stack: list[tuple[Var, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        # interior grads are scratch for this pass; leaf grads accumulate
        for node in topo:
            if node._parents:
                node.grad = None
        self._accum(np.ones_like(self.value))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if free and node._parents:
                node._parents = ()
                node._backward = None
                node._freed = True

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    # operator sugar
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

    def __repr__(self):
        return f"Var(shape={self.value.shape})"


def as_var(x) -> Var:
    """Wrap a plain array/scalar as a constant leaf; pass Vars through."""
    return x if isinstance(x, Var) else Var(x)


def onehot(idx, K: int) -> np.ndarray:
    """One-hot encode an int array along a new trailing axis (constant)."""
    idx = np.asarray(idx)
    out = np.zeros(idx.shape + (K,), dtype=np.float64)
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to `shape` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(op_name, a, b, fwd, da, db):
    a, b = as_var(a), as_var(b)
    try:
        value = fwd(a.value, b.value)
    except ValueError as e:
        raise ValueError(
            f"{op_name}: incompatible shapes {a.value.shape} and {b.value.shape}"
        ) from e

    def bw(g):
        a._accum(_unbroadcast(da(g, a.value, b.value), a.value.shape))
        b._accum(_unbroadcast(db(g, a.value, b.value), b.value.shape))

    return Var(value, (a, b), bw)


def add(a, b) -> Var:
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Var:
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Var:
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b) -> Var:
    return _binary("div", a, b, lambda x, y: x / y,
                   lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def minimum(a, b) -> Var:
    # ties send the gradient to the first argument
    return _binary("minimum", a, b, np.minimum,
                   lambda g, x, y: g * (x <= y), lambda g, x, y: g * (x > y))


def maximum(a, b) -> Var:
    return _binary("maximum", a, b, np.maximum,
                   lambda g, x, y: g * (x >= y), lambda g, x, y: g * (x < y))


def neg(a) -> Var:
    a = as_var(a)

    def bw(g):
        a._accum(-g)

    return Var(-a.value, (a,), bw)


def exp(a) -> Var:
    a = as_var(a)
    value = np.exp(a.value)

    def bw(g):
        a._accum(g * value)

    return Var(value, (a,), bw)


def log(a) -> Var:
    a = as_var(a)

    def bw(g):
        a._accum(g / a.value)

    return Var(np.log(a.value), (a,), bw)


def sigmoid(a) -> Var:
    a = as_var(a)
    value = 1.0 / (1.0 + np.exp(-a.value))

    def bw(g):
        a._accum(g * value * (1.0 - value))

    return Var(value, (a,), bw)


def softplus(a) -> Var:
    a = as_var(a)
    x = a.value
    value = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def bw(g):
        a._accum(g / (1.0 + np.exp(-x)))

    return Var(value, (a,), bw)


def gelu(a) -> Var:
    """Exact Gaussian-error-linear unit, x * Phi(x)."""
    a = as_var(a)
    x = a.value
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    value = x * phi

    def bw(g):
        dens = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        a._accum(g * (phi + x * dens))

    return Var(value, (a,), bw)


def clamp(a, lo=None, hi=None) -> Var:
    """Clip to [lo, hi]; gradient is zero outside the open interval."""
    a = as_var(a)
    value = np.clip(a.value, lo, hi)
    inside = np.ones_like(a.value, dtype=bool)
    if lo is not None:
        inside &= a.value > lo
    if hi is not None:
        inside &= a.value < hi

    def bw(g):
        a._accum(g * inside)

    return Var(value, (a,), bw)


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError(
            f"matmul: expected 2-D operands, got {a.value.shape} and {b.value.shape}"
        )
    if a.value.shape[1] != b.value.shape[0]:
        raise ValueError(
            f"matmul: incompatible shapes {a.value.shape} and {b.value.shape}"
        )

    def bw(g):
        a._accum(g @ b.value.T)
        b._accum(a.value.T @ g)

    return Var(a.value @ b.value, (a, b), bw)


def vsum(a, axis=None, keepdims: bool = False) -> Var:
    a = as_var(a)
    value = a.value.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            a._accum(np.broadcast_to(g, a.value.shape))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accum(np.broadcast_to(gg, a.value.shape))

    return Var(value, (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Var:
    a = as_var(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(vsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(a) -> Var:
    """Softmax over the last axis."""
    a = as_var(a)
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * value).sum(axis=-1, keepdims=True)
        a._accum(value * (g - dot))

    return Var(value, (a,), bw)


def gather(a, idx) -> Var:
    """Select one entry per row along the last axis: out[...] = a[..., idx[...]]."""
    a = as_var(a)
    idx = np.asarray(idx)
    if idx.shape != a.value.shape[:-1]:
        raise ValueError(
            f"gather: index shape {idx.shape} does not match {a.value.shape[:-1]}"
        )
    value = np.take_along_axis(a.value, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        ga = np.zeros_like(a.value)
        np.put_along_axis(ga, idx[..., None], g[..., None], axis=-1)
        a._accum(ga)

    return Var(value, (a,), bw)


def concat(parts, axis: int = -1) -> Var:
    parts = [as_var(p) for p in parts]
    value = np.concatenate([p.value for p in parts], axis=axis)
    sizes = [p.value.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for p, gp in zip(parts, np.split(g, splits, axis=axis)):
            p._accum(gp)

    return Var(value, tuple(parts), bw)


def reshape(a, shape) -> Var:
    a = as_var(a)
    old = a.value.shape

    def bw(g):
        a._accum(g.reshape(old))

    return Var(a.value.reshape(shape), (a,), bw)


def broadcast_to(a, shape) -> Var:
    a = as_var(a)
    try:
        value = np.broadcast_to(a.value, shape)
    except ValueError as e:
        raise ValueError(
            f"broadcast: cannot broadcast {a.value.shape} to {shape}"
        ) from e

    def bw(g):
        a._accum(_unbroadcast(g, a.value.shape))

    return Var(value.copy(), (a,), bw)


def stop_grad(a) -> Var:
    """Value of a, detached: contributes exactly zero gradient."""
    a = as_var(a)
    return Var(a.value)


class AdamW:
    """Decoupled-weight-decay Adam over a fixed list of parameter Vars."""

    def __init__(self, params, lr: float = 2e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            update = (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.value
            p.value = p.value - self.lr * update

    def state_arrays(self) -> dict:
        """Moment state as named arrays (for checkpointing)."""
        out = {"opt.t": np.array([float(self.t)])}
        for i in range(len(self.params)):
            out[f"opt.m.{i}"] = self.m[i]
            out[f"opt.v.{i}"] = self.v[i]
        return out

    def load_state_arrays(self, arrays: dict):
        self.t = int(arrays["opt.t"][0])
        for i in range(len(self.params)):
            self.m[i] = arrays[f"opt.m.{i}"].reshape(self.m[i].shape).copy()
            self.v[i] = arrays[f"opt.v.{i}"].reshape(self.v[i].shape).copy()


def global_grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    return math.sqrt(total)


def clip_grads_(params, max_norm: float) -> float:
    """Scale gradients in place so the global norm is at most max_norm."""
    norm = global_grad_norm(params)
    if norm > max_norm > 0.0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm

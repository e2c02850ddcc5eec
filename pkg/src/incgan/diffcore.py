"""Small reverse-mode autodiff engine over numpy arrays, plus Adam.

Tensors carry the dtype of whatever they were built from (float32 during
training, float64 for gradient checks). Scalar reductions are accumulated
in float64 and cast back. Every op records a closure that maps the output
gradient to one gradient per parent; ``backward`` replays those closures in
reverse topological order.
"""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, TrainingError, UsageError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op")
    __array_ufunc__ = None  # make numpy defer to the reflected operators below

    def __init__(self, data, requires_grad: bool = False, parents=(), backward_fn=None, op: str = "leaf"):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.data.shape}, dtype={self.data.dtype})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UsageError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def make_node(data: np.ndarray, parents: tuple, backward_fn: Callable, op: str) -> Tensor:
    """Create an op output. Gradient bookkeeping is dropped if no parent needs it."""
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward_fn, op)
    return Tensor(data, False, (), None, op)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else np.float64)
    return Tensor(arr)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # constants adopt the dtype of the tensor they meet
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    ndim_extra = g.ndim - len(shape)
    if ndim_extra > 0:
        g = g.sum(axis=tuple(range(ndim_extra)), dtype=np.float64).astype(g.dtype)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True, dtype=np.float64).astype(g.dtype)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_node(a.data * b.data, (a, b), bw, "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_node(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return make_node(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def log(x: Tensor) -> Tensor:
    return make_node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_node(out, (x,), lambda g: (g * out,), "exp")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data > lo) & (x.data < hi)
    out = np.clip(x.data, lo, hi).astype(x.dtype)
    return make_node(out, (x,), lambda g: (g * inside,), "clip")


# ---------------------------------------------------------------- reductions

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return make_node(out, (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    if count == 0:
        raise UsageError("mean over an empty axis")
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data.astype(np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out64 = z - lse
    soft = np.exp(out64)

    def bw(g):
        g64 = g.astype(np.float64)
        return ((g64 - soft * g64.sum(axis=axis, keepdims=True)).astype(x.dtype),)

    return make_node(out64.astype(x.dtype), (x,), bw, "log_softmax")


def l2_normalize(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Row-wise ``x / ||x||`` for a 2-D tensor.

    Rows whose norm falls below ``eps`` are divided by ``||x|| + eps`` instead,
    so exact unit norm holds everywhere else and zero rows stay finite.
    """
    x64 = x.data.astype(np.float64)
    norm = np.sqrt((x64 * x64).sum(axis=1, keepdims=True))
    denom = np.where(norm < eps, norm + eps, norm)
    out = (x64 / denom).astype(x.dtype)

    def bw(g):
        g64 = g.astype(np.float64)
        dot = (g64 * x64).sum(axis=1, keepdims=True)
        safe = np.where(norm > 0, norm, 1.0)
        dx = g64 / denom - x64 * dot / (denom * denom * safe)
        return (dx.astype(x.dtype),)

    return make_node(out, (x,), bw, "l2_normalize")


# ---------------------------------------------------------------- structure

def take(x: Tensor, index) -> Tensor:
    """Basic or integer-array indexing; gradient scatters back."""
    out = x.data[index]

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return make_node(out, (x,), bw, "take")


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ConfigError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return make_node(a.data @ b.data, (a, b), bw, "matmul")


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w.T + b`` with ``w`` stored as (out, in)."""
    if x.shape[-1] != w.shape[1]:
        raise ConfigError(f"affine: input width {x.shape[-1]} does not match weight {w.shape}")
    return add(matmul(x, transpose(w)), b)


def transpose(x: Tensor) -> Tensor:
    return make_node(x.data.T, (x,), lambda g: (g.T,), "transpose")


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """NHWC convolution; ``w`` has shape (k, k, c_in, c_out)."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ConfigError(f"conv2d: input {x.shape} does not match kernel {w.shape}")
    n, h, wd, c_in = x.shape
    k, _, _, c_out = w.shape
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, k * k * c_in)
    wmat = w.data.reshape(k * k * c_in, c_out)
    out = (cols @ wmat).reshape(n, ho, wo, c_out) + b.data

    def bw(g):
        g2 = g.reshape(-1, c_out)
        dw = (cols.T @ g2).reshape(w.shape)
        db = g2.sum(axis=0, dtype=np.float64).astype(b.dtype)
        dcols = (g2 @ wmat.T).reshape(n, ho, wo, k, k, c_in)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, :, i, j]
        return dxp[:, pad:pad + h, pad:pad + wd], dw, db

    return make_node(out.astype(x.dtype), (x, w, b), bw, "conv2d")


# ---------------------------------------------------------------- backward

def _toposort(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, leaves: Mapping[str, Tensor] | None = None) -> dict[str, np.ndarray]:
    """Back-propagate from a scalar ``loss``.

    Returns the gradient for each named leaf (zeros if the leaf did not
    contribute). With ``leaves=None`` the gradients are only left on ``.grad``.
    """
    if not isinstance(loss, Tensor) or loss.backward_fn is None:
        raise UsageError("backward called on a value with no recorded forward computation")
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _toposort(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node.backward_fn is None or node.grad is None:
            continue
        grads = node.backward_fn(node.grad)
        for parent, g in zip(node.parents, grads):
            if not parent.requires_grad or g is None:
                continue
            g = np.asarray(g, dtype=parent.dtype)
            parent.grad = g if parent.grad is None else parent.grad + g
        if node.parents:
            node.grad = None  # intermediate grads are not needed past this point
    if leaves is None:
        return {}
    return {
        name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data))
        for name, leaf in leaves.items()
    }


# ---------------------------------------------------------------- parameters

class ParameterSet:
    """Named parameter arrays together with their Adam moments."""

    def __init__(self, values: Mapping[str, np.ndarray]):
        self.values = {k: np.array(v) for k, v in values.items()}
        self.reset_optimizer()

    def reset_optimizer(self) -> None:
        self.step = 0
        self.m = {k: np.zeros_like(v) for k, v in self.values.items()}
        self.v = {k: np.zeros_like(v) for k, v in self.values.items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self.values[name] = value
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __iter__(self):
        return iter(self.values)

    def items(self):
        return self.values.items()

    def leaves(self) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=True, op=k) for k, v in self.values.items()}

    def copy(self, dtype=None) -> "ParameterSet":
        out = ParameterSet({k: (v.astype(dtype) if dtype else v.copy()) for k, v in self.values.items()})
        if dtype is None:
            out.step = self.step
            out.m = {k: v.copy() for k, v in self.m.items()}
            out.v = {k: v.copy() for k, v in self.v.items()}
        return out

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.values.values())


def glorot_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(np.sum([np.sum(g.astype(np.float64) ** 2) for g in grads.values()])))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        grads = {k: (g * scale).astype(g.dtype) for k, g in grads.items()}
    return grads, norm


def adam_step(
    params: ParameterSet,
    grads: Mapping[str, np.ndarray],
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParameterSet:
    """One bias-corrected Adam update, applied in place."""
    for name, g in grads.items():
        if name not in params:
            raise UsageError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ConfigError(f"gradient shape {g.shape} does not match parameter {name!r} {params[name].shape}")
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    params.step += 1
    t = params.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        p = params.values[name]
        m = params.m[name] = beta1 * params.m[name] + (1 - beta1) * g
        v = params.v[name] = beta2 * params.v[name] + (1 - beta2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        params.values[name] = (p - update).astype(p.dtype)
    return params


def finite_diff_check(
    loss_fn: Callable[[Mapping[str, Tensor]], Tensor],
    params: ParameterSet,
    step: float = 1e-3,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    Both sides are evaluated on a float64 copy of ``params``. Per parameter
    tensor the error is ``|a - n| / max(1e-8, |a| + |n|)`` with ``|.|`` the
    Euclidean norm over the checked coordinates; ``max_coords`` samples that
    many coordinates per tensor instead of all of them.
    """
    shadow = params.copy(dtype=np.float64)
    leaves = shadow.leaves()
    analytic = backward(loss_fn(leaves), leaves)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, value in shadow.items():
        flat = value.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        numeric = np.empty(coords.size)
        for j, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + step
            up = loss_fn(shadow.leaves()).item()
            flat[c] = orig - step
            down = loss_fn(shadow.leaves()).item()
            flat[c] = orig
            numeric[j] = (up - down) / (2 * step)
        a = analytic[name].reshape(-1)[coords].astype(np.float64)
        err = np.linalg.norm(a - numeric) / max(1e-8, np.linalg.norm(a) + np.linalg.norm(numeric))
        worst = max(worst, float(err))
    return worst

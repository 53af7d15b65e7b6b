"""Minimal reverse-mode automatic differentiation over numpy arrays.

Image tensors are stored channels-last, ``(N, H, W, C)``, and convolution
kernels as ``(kh, kw, C_in, C_out)``. Every op here preserves the dtype of its
inputs (float32 for training, float64 for gradient checks); reductions that
produce losses accumulate in float64.

A forward pass builds a graph implicitly through the ``_parents`` links of the
tensors it creates. :func:`backward` walks that graph once and then releases
it, so a second backward over the same graph raises :class:`LifecycleError`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, DomainError, LifecycleError, NumericError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_released")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._released = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.op == "leaf"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise DimensionError("division is only defined by a python scalar")
        return mul(self, 1.0 / other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def backward(self):
        return backward(self)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], fn: BackwardFn, op: str) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = fn
    out.op = op
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b) -> Tensor:
    if np.isscalar(b):
        return _make(a.data + a.data.dtype.type(b), (a,), lambda g: (g,), "add_scalar")
    b = as_tensor(b)
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b) -> Tensor:
    if np.isscalar(b):
        return add(a, -b)
    b = as_tensor(b)
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product with a tensor, a same-shape constant array, or a scalar."""
    if np.isscalar(b):
        s = a.data.dtype.type(b)
        return _make(a.data * s, (a,), lambda g: (g * s,), "mul_scalar")
    if isinstance(b, np.ndarray):
        if b.shape != a.shape:
            raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
        c = b.astype(a.dtype, copy=False)
        return _make(a.data * c, (a,), lambda g: (g * c,), "mul_const")
    _same_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2 * a.data * g,), "square")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of a nonpositive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,), "relu")


def sigmoid_array(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softplus_array(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(x.dtype.type(0), x)


def softplus(a: Tensor) -> Tensor:
    sig = sigmoid_array(a.data)
    return _make(softplus_array(a.data), (a,), lambda g: (g * sig,), "softplus")


def tsum(a: Tensor) -> Tensor:
    total = np.asarray(a.data.sum(dtype=np.float64))
    shape, dtype = a.shape, a.dtype
    return _make(total, (a,), lambda g: (np.full(shape, g, dtype=dtype),), "sum")


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    total = np.asarray(a.data.sum(dtype=np.float64) / n)
    shape, dtype = a.shape, a.dtype
    return _make(total, (a,), lambda g: (np.full(shape, g / n, dtype=dtype),), "mean")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    arrays = [t.data for t in tensors]
    out = np.concatenate(arrays, axis=axis)
    bounds = np.cumsum([0] + [a.shape[axis] for a in arrays])

    def bw(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _make(out, tuple(tensors), bw, "concat")


# ---------------------------------------------------------------- image ops


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2D cross-correlation with zero padding.

    x is (N, H, W, C_in), kernel is (kh, kw, C_in, C_out), bias is (C_out,).
    Output spatial size is ``(H + 2*pad - kh) // stride + 1``.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"conv2d: input must be 4-D (N,H,W,C), got shape {x.shape}")
    if kernel.data.ndim != 4:
        raise DimensionError(f"conv2d: kernel must be 4-D (kh,kw,Cin,Cout), got shape {kernel.shape}")
    n, h, w, cin = x.shape
    kh, kw, kcin, cout = kernel.shape
    if kcin != cin:
        raise DimensionError(f"conv2d: input channel axis {cin} != kernel input axis {kcin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d: kernel spatial axes must be odd, got {kh}x{kw}")
    if stride < 1 or pad < 0:
        raise DomainError(f"conv2d: need stride >= 1 and pad >= 0, got stride={stride}, pad={pad}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}")

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    k = kernel.data
    out = np.zeros((n, ho, wo, cout), dtype=np.result_type(x.data, k))
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out += xp[:, i:i + hs:stride, j:j + ws:stride, :] @ k[i, j]
    if bias is not None:
        out += bias.data

    def bw(g):
        gk = np.empty_like(k)
        gxp = np.zeros_like(xp) if x.requires_grad else None
        g2 = g.reshape(-1, cout)
        for i in range(kh):
            for j in range(kw):
                win = xp[:, i:i + hs:stride, j:j + ws:stride, :]
                gk[i, j] = win.reshape(-1, cin).T @ g2
                if gxp is not None:
                    gxp[:, i:i + hs:stride, j:j + ws:stride, :] += g @ k[i, j].T
        gx = None
        if gxp is not None:
            gx = gxp[:, pad:pad + h, pad:pad + w, :] if pad else gxp
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1, 2), dtype=np.float64).astype(g.dtype))
        return tuple(grads)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, bw, "conv2d")


def maxpool2(x: Tensor) -> Tensor:
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2: spatial axes must be even, got H={h}, W={w}")
    blocks = x.data.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    blocks = blocks.reshape(n, h // 2, w // 2, c, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        g4 = np.zeros((n, h // 2, w // 2, c, 4), dtype=g.dtype)
        np.put_along_axis(g4, idx[..., None], g[..., None], axis=-1)
        g4 = g4.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        return (g4.reshape(n, h, w, c),)

    return _make(out, (x,), bw, "maxpool2")


def upsample2(x: Tensor) -> Tensor:
    n, h, w, c = x.shape
    out = np.broadcast_to(x.data[:, :, None, :, None, :], (n, h, 2, w, 2, c)).reshape(n, 2 * h, 2 * w, c)

    def bw(g):
        return (g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)),)

    return _make(out, (x,), bw, "upsample2")


def pool_and_upsample(x: Tensor, mode: str) -> Tensor:
    if mode == "maxpool2":
        return maxpool2(x)
    if mode == "nearest_upsample2":
        return upsample2(x)
    raise DomainError(f"unknown resampling mode {mode!r}")


def softmax_channels(logits: Tensor) -> Tensor:
    """Softmax over the trailing channel axis."""
    z = logits.data
    if not np.all(np.isfinite(z)):
        raise NumericError("softmax_channels: non-finite logits")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (logits,), bw, "softmax")


LOG_CLAMP = 1e-12


def cross_entropy(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over pixels of ``-log p(true class)``; probs are (..., C), labels (...)."""
    labels = np.asarray(labels)
    c = probs.shape[-1]
    if labels.shape != probs.shape[:-1]:
        raise DimensionError(f"cross_entropy: labels {labels.shape} vs probs {probs.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise DomainError(f"cross_entropy: labels must lie in [0, {c - 1}]")
    idx = labels.astype(np.intp)[..., None]
    pt = np.take_along_axis(probs.data, idx, axis=-1)[..., 0]
    clamped = np.maximum(pt.astype(np.float64), LOG_CLAMP)
    count = pt.size
    value = np.asarray(-np.log(clamped).sum() / count)

    def bw(g):
        gp = np.zeros_like(probs.data)
        local = np.where(pt >= LOG_CLAMP, -float(g) / (count * clamped), 0.0).astype(probs.dtype)
        np.put_along_axis(gp, idx, local[..., None], axis=-1)
        return (gp,)

    return _make(value, (probs,), bw, "cross_entropy")


# ---------------------------------------------------------------- backward


@dataclass
class Graph:
    """Topologically ordered nodes reachable from a loss (inputs precede users)."""

    nodes: list

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
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
        return cls(order)

    def leaves(self) -> list[Tensor]:
        return [t for t in self.nodes if t.is_leaf]


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> list[np.ndarray] | None:
    """Accumulate dloss/dleaf into ``.grad`` of every reachable grad-tracking leaf.

    If ``params`` is given, returns their gradients in order, with zeros for
    parameters the loss does not depend on.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._released:
        raise LifecycleError("backward called on a graph that was already consumed")
    if not loss.requires_grad:
        raise LifecycleError("loss does not depend on any grad-tracking tensor")
    graph = Graph.trace(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            g = np.asarray(g, dtype=node.dtype).reshape(node.shape)
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if node._released:
            raise LifecycleError(f"graph node {node.op} was already consumed")
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg
    for node in graph.nodes:
        if not node.is_leaf:
            node._backward = None
            node._parents = ()
            node._released = True
    if params is None:
        return None
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

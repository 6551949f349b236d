"""Minimal reverse-mode autodiff over numpy float64 arrays.

Just enough surface for a transformer: broadcast add/mul, (batched) matmul,
gather, concat, softmax, GELU, RMS norm, and the two loss heads. Kept
deliberately small so finite-difference checks can vouch for all of it.
"""

from __future__ import annotations

import math

import numpy as np


class NumericError(ArithmeticError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "parents", "_backward", "requires_grad")

    def __init__(self, data, parents=(), backward=None, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.data.shape

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def const(data) -> Tensor:
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, (a, b))

    def back(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.shape))

    out._backward = back
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data, (a, b))

    def back(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.shape))

    out._backward = back
    return out


def scale(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data * s, (a,))

    def back(g):
        if a.requires_grad:
            a.accumulate(g * s)

    out._backward = back
    return out


def add_const(a: Tensor, c: np.ndarray) -> Tensor:
    out = Tensor(a.data + c, (a,))

    def back(g):
        if a.requires_grad:
            a.accumulate(g)

    out._backward = back
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(np.matmul(a.data, b.data), (a, b))

    def back(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a.accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b.accumulate(_unbroadcast(gb, b.shape))

    out._backward = back
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), (a,))

    def back(g):
        if a.requires_grad:
            a.accumulate(g.reshape(a.shape))

    out._backward = back
    return out


def transpose(a: Tensor, axes) -> Tensor:
    out = Tensor(a.data.transpose(axes), (a,))
    inv = np.argsort(axes)

    def back(g):
        if a.requires_grad:
            a.accumulate(g.transpose(inv))

    out._backward = back
    return out


def take(a: Tensor, idx: np.ndarray) -> Tensor:
    """Row gather from a 2D table; idx may have any shape."""
    out = Tensor(a.data[idx], (a,))

    def back(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            np.add.at(acc, idx, g)
            a.accumulate(acc)

    out._backward = back
    return out


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis), tuple(parts))
    sizes = [p.data.shape[axis] for p in parts]

    def back(g):
        offset = 0
        for p, s in zip(parts, sizes):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(offset, offset + s)
                p.accumulate(g[tuple(sl)])
            offset += s

    out._backward = back
    return out


def softmax(a: Tensor) -> Tensor:
    x = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(x)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s, (a,))

    def back(g):
        if a.requires_grad:
            dot = (g * s).sum(axis=-1, keepdims=True)
            a.accumulate(s * (g - dot))

    out._backward = back
    return out


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    out = Tensor(0.5 * x * (1.0 + t), (a,))

    def back(g):
        if a.requires_grad:
            du = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
            a.accumulate(g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du))

    out._backward = back
    return out


def rms_norm(a: Tensor, w: Tensor, eps: float = 1e-6) -> Tensor:
    x = a.data
    ms = (x**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    y = x * inv
    out = Tensor(y * w.data, (a, w))
    d = x.shape[-1]

    def back(g):
        if w.requires_grad:
            w.accumulate((g * y).reshape(-1, d).sum(axis=0))
        if a.requires_grad:
            gw = g * w.data
            dot = (gw * x).sum(axis=-1, keepdims=True)
            a.accumulate(inv * gw - x * (inv**3) * dot / d)

    out._backward = back
    return out


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean token-level CE over positions where mask is true."""
    n = int(mask.sum())
    if n == 0:
        raise ValueError("empty target")
    x = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=-1))
    nll = lse - x[np.arange(len(targets)), targets]
    loss = float((nll * mask).sum() / n)
    out = Tensor(loss, (logits,))

    def back(g):
        if logits.requires_grad:
            p = np.exp(x - lse[:, None])
            p[np.arange(len(targets)), targets] -= 1.0
            logits.accumulate(g * p * (mask[:, None] / n))

    out._backward = back
    return out


def masked_mse(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """MSE over rows of pred where mask is true."""
    n = int(mask.sum()) * pred.data.shape[-1]
    if n == 0:
        raise ValueError("no masked patches")
    diff = (pred.data - target) * mask[:, None]
    out = Tensor(float((diff**2).sum() / n), (pred,))

    def back(g):
        if pred.requires_grad:
            pred.accumulate(g * 2.0 * diff / n)

    out._backward = back
    return out


def check_finite(t: Tensor, where: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite activation in {where}")
    return t

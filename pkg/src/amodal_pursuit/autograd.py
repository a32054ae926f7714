"""Minimal reverse-mode autodiff over numpy arrays.

Just enough layer types for the policy network: dense, conv, 2x2 max
pool, per-sample channel normalisation, relu, log-softmax and a few
elementwise reductions for the losses.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np


_DTYPE = [np.float64]


@contextmanager
def precision(dtype):
    """Temporarily build tensors in ``dtype`` (float64 outside this block)."""
    prev = _DTYPE[0]
    _DTYPE[0] = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE[0] = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=_DTYPE[0])
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accum(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(_lift(other), -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward) -> Tensor:
    req = any(p.requires_grad for p in parents)
    return Tensor(data, req, parents if req else (), backward if req else None)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def backward(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(g, b.shape))
    return _node(a.data + b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def backward(g):
        a._accum(_unbroadcast(g * b.data, a.shape))
        b._accum(_unbroadcast(g * a.data, b.shape))
    return _node(a.data * b.data, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def backward(g):
        a._accum(g @ b.data.T)
        b._accum(a.data.T @ g)
    return _node(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w.T + b`` with ``w`` stored as (out, in)."""
    def backward(g):
        x._accum(g @ w.data)
        w._accum(g.T @ x.data)
        b._accum(g.sum(axis=0))
    return _node(x.data @ w.data.T + b.data, (x, w, b), backward)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0

    def backward(g):
        x._accum(g * pos)
    return _node(np.where(pos, x.data, 0.0), (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    def backward(g):
        x._accum(g.reshape(x.shape))
    return _node(x.data.reshape(shape), (x,), backward)


def concat(xs, axis: int = -1) -> Tensor:
    xs = [_lift(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        for x, part in zip(xs, np.split(g, cuts, axis=axis)):
            x._accum(part)
    return _node(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def backward(g):
        x._accum(g * out)
    return _node(out, (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    def backward(g):
        x._accum(np.broadcast_to(g, x.shape))
    return _node(np.asarray(x.data.sum()), (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size

    def backward(g):
        x._accum(np.broadcast_to(g / n, x.shape))
    return _node(np.asarray(x.data.mean()), (x,), backward)


def sum_rows(x: Tensor) -> Tensor:
    def backward(g):
        x._accum(np.broadcast_to(g[:, None], x.shape))
    return _node(x.data.sum(axis=1), (x,), backward)


def pick(x: Tensor, idx) -> Tensor:
    """Row-wise gather ``x[i, idx[i]]``."""
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(len(idx))

    def backward(g):
        full = np.zeros_like(x.data)
        full[rows, idx] = g
        x._accum(full)
    return _node(x.data[rows, idx], (x,), backward)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def backward(g):
        x._accum(g - soft * g.sum(axis=-1, keepdims=True))
    return _node(out, (x,), backward)


def conv2d(x: Tensor, w: Tensor, b: Tensor, padding: int = 0) -> Tensor:
    """Stride-1 convolution. x (N, C, H, W), w (O, C, k, k), b (O,).

    Accumulates one (C -> O) contraction per kernel offset, which keeps
    memory at the size of the output instead of a full im2col buffer.
    """
    n, c, h, wd = x.shape
    o, c2, k, k2 = w.shape
    if c != c2 or k != k2:
        from .errors import ShapeError
        raise ShapeError(f"conv weight {w.shape} incompatible with input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    xp = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))  # N, Hp, Wp, C
    ho, wo = xp.shape[1] - k + 1, xp.shape[2] - k + 1
    wt = w.data.transpose(2, 3, 1, 0)  # k, k, C, O
    out = np.empty((n * ho * wo, o), dtype=xp.dtype)
    out[...] = b.data
    for i in range(k):
        for j in range(k):
            # explicit 2-D copy so the product goes through a single GEMM
            out += xp[:, i:i + ho, j:j + wo, :].reshape(-1, c) @ wt[i, j]
    out = out.reshape(n, ho, wo, o)

    def backward(g):
        gl = np.ascontiguousarray(g.transpose(0, 2, 3, 1))  # N, Ho, Wo, O
        gf = gl.reshape(-1, o)
        gw = np.empty((k, k, c, o), dtype=gf.dtype)
        for i in range(k):
            for j in range(k):
                gw[i, j] = xp[:, i:i + ho, j:j + wo, :].reshape(-1, c).T @ gf
        w._accum(gw.transpose(3, 2, 0, 1))
        b._accum(gf.sum(axis=0))
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[:, i:i + ho, j:j + wo, :] += (gf @ wt[i, j].T).reshape(n, ho, wo, c)
            if padding:
                dxp = dxp[:, padding:padding + h, padding:padding + wd, :]
            x._accum(np.ascontiguousarray(dxp.transpose(0, 3, 1, 2)))
    return _node(np.ascontiguousarray(out.transpose(0, 3, 1, 2)), (x, w, b), backward)


def take_rows(x: Tensor, rows) -> Tensor:
    """Gather rows along the first axis."""
    rows = np.asarray(rows, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, rows, g)
        x._accum(full)
    return _node(x.data[rows], (x,), backward)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 / stride-2 max pool, floor semantics. Ties route gradient to the first max."""
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    crop = x.data[:, :, :h2 * 2, :w2 * 2]
    blocks = crop.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gcrop = gb.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2 * 2, w2 * 2)
        full = np.zeros_like(x.data)
        full[:, :, :h2 * 2, :w2 * 2] = gcrop
        x._accum(full)
    return _node(out, (x,), backward)


def channel_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each (sample, channel) plane over its spatial positions, then scale and shift."""
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    g4 = gamma.data.reshape(1, -1, 1, 1)
    out = xhat * g4 + beta.data.reshape(1, -1, 1, 1)
    m = x.shape[2] * x.shape[3]

    def backward(g):
        gamma._accum((g * xhat).sum(axis=(0, 2, 3)))
        beta._accum(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gx = g * g4
            dx = inv / m * (m * gx - gx.sum(axis=(2, 3), keepdims=True)
                            - xhat * (gx * xhat).sum(axis=(2, 3), keepdims=True))
            x._accum(dx)
    return _node(out, (x, gamma, beta), backward)


def compute_dtype():
    return _DTYPE[0]

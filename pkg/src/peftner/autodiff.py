"""Minimal dense-tensor math with reverse-mode automatic differentiation.

Tensors wrap float64 numpy arrays; each op records a backward closure and the
graph is walked in reverse topological order. All stochastic ops take an
explicit numpy Generator so runs are bit-reproducible given a seed.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeMismatch(Exception):
    pass


class NonScalarLoss(Exception):
    pass


class DoubleBackward(Exception):
    pass


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Deterministic generator for (seed, stream...) so every stochastic op
    draws from its own named stream."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *stream])))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple = ()
        self._backward: Callable[[], None] | None = None
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- convenience arithmetic --------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    tracked = tuple(p for p in parents if p.requires_grad or p._parents)
    if tracked:
        out.requires_grad = False  # not a leaf; grad allocated lazily
        out._parents = tracked
        out._backward = backward
    return out


def _needs_graph(*tensors: Tensor) -> bool:
    return any(t.requires_grad or t._parents for t in tensors)


def _sum_to_shape(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Undo numpy broadcasting: sum gradient down to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- primitives -------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeMismatch(f"add: {a.shape} + {b.shape}") from None
    if not _needs_graph(a, b):
        return Tensor(data)
    out = _node(data, (a, b), None)

    def backward():
        g = out.grad
        if a.requires_grad or a._parents:
            _accumulate(a, _sum_to_shape(g, a.shape))
        if b.requires_grad or b._parents:
            _accumulate(b, _sum_to_shape(g, b.shape))

    out._backward = backward
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeMismatch(f"mul: {a.shape} * {b.shape}") from None
    if not _needs_graph(a, b):
        return Tensor(data)
    out = _node(data, (a, b), None)

    def backward():
        g = out.grad
        if a.requires_grad or a._parents:
            _accumulate(a, _sum_to_shape(g * b.data, a.shape))
        if b.requires_grad or b._parents:
            _accumulate(b, _sum_to_shape(g * a.data, b.shape))

    out._backward = backward
    return out


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    if not _needs_graph(a):
        return Tensor(a.data * c)
    out = _node(a.data * c, (a,), None)
    out._backward = lambda: _accumulate(a, out.grad * c)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    if a.ndim != b.ndim and b.ndim != 2:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    if a.ndim == b.ndim and a.shape[:-2] != b.shape[:-2]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    data = a.data @ b.data
    if not _needs_graph(a, b):
        return Tensor(data)
    out = _node(data, (a, b), None)

    def backward():
        g = out.grad
        if a.requires_grad or a._parents:
            _accumulate(a, g @ b.data.swapaxes(-1, -2))
        if b.requires_grad or b._parents:
            if b.ndim == a.ndim:
                _accumulate(b, a.data.swapaxes(-1, -2) @ g)
            else:  # shared right operand across leading dims
                k, m = a.shape[-1], g.shape[-1]
                _accumulate(b, a.data.reshape(-1, k).T @ g.reshape(-1, m))

    out._backward = backward
    return out


def softmax(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    if not _needs_graph(x):
        return Tensor(y)
    out = _node(y, (x,), None)

    def backward():
        g = out.grad
        _accumulate(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    out._backward = backward
    return out


def log_softmax(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse
    if not _needs_graph(x):
        return Tensor(y)
    out = _node(y, (x,), None)

    def backward():
        g = out.grad
        p = np.exp(y)
        _accumulate(x, g - p * g.sum(axis=-1, keepdims=True))

    out._backward = backward
    return out


LAYER_NORM_EPS = 1e-12


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeMismatch(f"layer_norm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    y = xhat * gamma.data + beta.data
    if not _needs_graph(x, gamma, beta):
        return Tensor(y)
    out = _node(y, (x, gamma, beta), None)

    def backward():
        g = out.grad
        if gamma.requires_grad or gamma._parents:
            _accumulate(gamma, (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0))
        if beta.requires_grad or beta._parents:
            _accumulate(beta, g.reshape(-1, x.shape[-1]).sum(axis=0))
        if x.requires_grad or x._parents:
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, inv_std * (dxhat - m1 - xhat * m2))

    out._backward = backward
    return out


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    # tanh approximation (the BERT-family convention)
    u = _GELU_C * (x.data + 0.044715 * x.data**3)
    t = np.tanh(u)
    y = 0.5 * x.data * (1.0 + t)
    if not _needs_graph(x):
        return Tensor(y)
    out = _node(y, (x,), None)

    def backward():
        du = _GELU_C * (1.0 + 3 * 0.044715 * x.data**2)
        dy = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t**2) * du
        _accumulate(x, out.grad * dy)

    out._backward = backward
    return out


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: train-time scaling by 1/(1-rate), identity at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate {rate} outside [0, 1)")
    if rate == 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    factor = 1.0 / (1.0 - rate)
    y = x.data * keep * factor
    if not _needs_graph(x):
        return Tensor(y)
    out = _node(y, (x,), None)
    out._backward = lambda: _accumulate(x, out.grad * keep * factor)
    return out


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    data = table.data[ids]
    if not _needs_graph(table):
        return Tensor(data)
    out = _node(data, (table,), None)

    def backward():
        g = np.zeros_like(table.data)
        np.add.at(g, ids, out.grad)
        _accumulate(table, g)

    out._backward = backward
    return out


def transpose(x: Tensor, axes: tuple | None = None) -> Tensor:
    data = np.transpose(x.data, axes)
    if not _needs_graph(x):
        return Tensor(data)
    inverse = None if axes is None else tuple(np.argsort(axes))
    out = _node(data, (x,), None)
    out._backward = lambda: _accumulate(x, np.transpose(out.grad, inverse))
    return out


def reshape(x: Tensor, shape: tuple) -> Tensor:
    data = x.data.reshape(shape)
    if not _needs_graph(x):
        return Tensor(data)
    out = _node(data, (x,), None)
    out._backward = lambda: _accumulate(x, out.grad.reshape(x.shape))
    return out


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    data = np.where(mask, value, x.data)
    if not _needs_graph(x):
        return Tensor(data)
    out = _node(data, (x,), None)
    out._backward = lambda: _accumulate(x, np.where(mask, 0.0, out.grad))
    return out


def tsum(x: Tensor, axis=None) -> Tensor:
    data = x.data.sum(axis=axis)
    if not _needs_graph(x):
        return Tensor(data)
    out = _node(data, (x,), None)

    def backward():
        g = out.grad
        if axis is not None:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape).copy())

    out._backward = backward
    return out


def tmean(x: Tensor, axis=None) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    return scale(tsum(x, axis), 1.0 / count)


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows of a 2-D tensor; backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.int64)
    data = x.data[idx]
    if not _needs_graph(x):
        return Tensor(data)
    out = _node(data, (x,), None)

    def backward():
        g = np.zeros_like(x.data)
        np.add.at(g, idx, out.grad)
        _accumulate(x, g)

    out._backward = backward
    return out


def take_per_row(x: Tensor, idx: np.ndarray) -> Tensor:
    """out[..., i, j] = x[..., i, idx[i, j]] for a shared (n, m) index matrix.

    x has shape (..., n, B); idx values index the last axis. Used to expand
    per-bucket relative-position scores into per-pair attention terms.
    """
    idx = np.asarray(idx, dtype=np.int64)
    n = x.shape[-2]
    if idx.shape[0] != n:
        raise ShapeMismatch(f"take_per_row: x {x.shape}, idx {idx.shape}")
    rows = np.arange(n)[:, None]
    data = x.data[..., rows, idx]
    if not _needs_graph(x):
        return Tensor(data)
    out = _node(data, (x,), None)

    def backward():
        g = np.zeros_like(x.data)
        if x.ndim == 2:
            np.add.at(g, (rows, idx), out.grad)
        else:
            flat = g.reshape(-1, *x.shape[-2:])
            gout = out.grad.reshape(-1, *out.grad.shape[-2:])
            for h in range(flat.shape[0]):
                np.add.at(flat[h], (rows, idx), gout[h])
        _accumulate(x, g)

    out._backward = backward
    return out


def row_slice(x: Tensor, start: int, stop: int) -> Tensor:
    data = x.data[start:stop]
    if not _needs_graph(x):
        return Tensor(data)
    out = _node(data, (x,), None)

    def backward():
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[start:stop] += out.grad

    out._backward = backward
    return out


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=0)
    if not any(_needs_graph(t) for t in tensors):
        return Tensor(data)
    out = _node(data, tuple(tensors), None)
    offsets = np.cumsum([0] + [t.shape[0] for t in tensors])

    def backward():
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad or t._parents:
                _accumulate(t, out.grad[lo:hi])

    out._backward = backward
    return out


# -- backward pass ----------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Fill gradients of everything the scalar loss depends on."""
    if loss.size != 1:
        raise NonScalarLoss(f"loss has shape {loss.shape}; expected a scalar")
    if loss._backward_done:
        raise DoubleBackward("backward() already ran for this loss; rebuild the graph")
    loss._backward_done = True

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward()


# -- finite-difference instrument -------------------------------------------


def grad_check(
    f: Callable[[], Tensor],
    params: Tensor | Iterable[Tensor],
    h: float = 1e-5,
    sample: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients of scalar f() against central differences.

    Returns the max relative error over all checked coordinates of every
    tensor in `params`. `sample` caps the coordinates checked per tensor
    (deterministic subsample via `rng`).
    """
    if isinstance(params, Tensor):
        params = [params]
    params = list(params)
    for p in params:
        p.zero_grad()
    backward(f())
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        coords = np.arange(flat.size)
        if sample is not None and flat.size > sample:
            if rng is None:
                rng = make_rng(0)
            coords = rng.choice(flat.size, size=sample, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            hi = f().item()
            flat[c] = orig - h
            lo = f().item()
            flat[c] = orig
            fd = (hi - lo) / (2.0 * h)
            denom = max(abs(gflat[c]), abs(fd), 1e-6)
            worst = max(worst, abs(gflat[c] - fd) / denom)
    return worst

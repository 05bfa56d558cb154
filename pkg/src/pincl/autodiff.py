"""Dense-tensor reverse-mode automatic differentiation with an Adam optimizer.

Everything is 64-bit: desk-scale models are small and the gradient checks
demand the precision.  The primitive set is exactly what the model and the
physics losses need -- elementwise arithmetic with numpy-style broadcasting
up to rank 3, matrix products, softmax, layer normalization, GELU/ReLU,
reductions, reshapes, column slicing/concatenation, and products with
constant sparse matrices (used for grid-derivative stencils).

Gradients are computed functionally: ``grad(loss, params)`` walks the graph
once and returns one array per parameter without mutating anything, so two
calls on identical inputs are bit-identical.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from scipy import sparse
from scipy.special import erf

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (pure evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense float64 array plus the bookkeeping backward needs."""

    __slots__ = ("values", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, values, requires_grad=False, name=None):
        self.values = np.asarray(values, dtype=np.float64)
        if self.values.ndim > 3:
            raise ValueError(f"rank {self.values.ndim} tensors unsupported (max 3)")
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise ValueError("item() requires a single-element tensor")
        return float(self.values.reshape(()))

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad}{tag})"

    # Operator sugar; constants are wrapped on the fly.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(values, name=None) -> Tensor:
    return Tensor(values, requires_grad=False, name=name)


def _node(values, parents, backward) -> Tensor:
    """Create a graph node; skips bookkeeping under no_grad or constant parents."""
    track = _grad_enabled and any(p.requires_grad or p._parents for p in parents)
    out = Tensor(values, requires_grad=False)
    if track:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def backward(g, acc):
        acc(a, _unbroadcast(g, a.values.shape))
        acc(b, _unbroadcast(g, b.values.shape))

    return _node(a.values + b.values, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def backward(g, acc):
        acc(a, _unbroadcast(g, a.values.shape))
        acc(b, _unbroadcast(-g, b.values.shape))

    return _node(a.values - b.values, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def backward(g, acc):
        acc(a, _unbroadcast(g * b.values, a.values.shape))
        acc(b, _unbroadcast(g * a.values, b.values.shape))

    return _node(a.values * b.values, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def backward(g, acc):
        acc(a, _unbroadcast(g / b.values, a.values.shape))
        acc(b, _unbroadcast(-g * a.values / (b.values * b.values), b.values.shape))

    return _node(a.values / b.values, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g, acc):
        acc(a, -g)

    return _node(-a.values, (a,), backward)


def square(a: Tensor) -> Tensor:
    def backward(g, acc):
        acc(a, 2.0 * a.values * g)

    return _node(a.values * a.values, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.values)

    def backward(g, acc):
        acc(a, 0.5 * g / y)

    return _node(y, (a,), backward)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.values)

    def backward(g, acc):
        acc(a, g * y)

    return _node(y, (a,), backward)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0.0

    def backward(g, acc):
        acc(a, g * mask)

    return _node(np.where(mask, a.values, 0.0), (a,), backward)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU: x * Phi(x)."""
    x = a.values
    phi_cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def backward(g, acc):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        acc(a, g * (phi_cdf + x * pdf))

    return _node(x * phi_cdf, (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g, acc):
        inner = (g * y).sum(axis=axis, keepdims=True)
        acc(a, y * (g - inner))

    return _node(y, (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ValueError("matmul expects rank-2 operands")

    def backward(g, acc):
        acc(a, g @ b.values.T)
        acc(b, a.values.T @ g)

    return _node(a.values @ b.values, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise ValueError("transpose expects rank-2 operands")

    def backward(g, acc):
        acc(a, g.T)

    return _node(a.values.T.copy(), (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.values.shape

    def backward(g, acc):
        acc(a, g.reshape(old))

    return _node(a.values.reshape(shape), (a,), backward)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.values.ndim != 2:
        raise ValueError("slice_cols expects rank-2 operands")

    def backward(g, acc):
        full = np.zeros_like(a.values)
        full[:, start:stop] = g
        acc(a, full)

    return _node(a.values[:, start:stop].copy(), (a,), backward)


def concat_cols(parts) -> Tensor:
    parts = [_wrap(p) for p in parts]
    widths = [p.values.shape[1] for p in parts]
    offsets = np.concatenate([[0], np.cumsum(widths)])

    def backward(g, acc):
        for p, j0, j1 in zip(parts, offsets[:-1], offsets[1:]):
            acc(p, g[:, j0:j1])

    return _node(np.concatenate([p.values for p in parts], axis=1), tuple(parts), backward)


def spmm(matrix: sparse.spmatrix, x: Tensor) -> Tensor:
    """Product with a constant sparse matrix (gradient via the transpose)."""

    def backward(g, acc):
        mt = getattr(matrix, "_pincl_t", None)
        if mt is None:
            mt = matrix.T.tocsr()
            matrix._pincl_t = mt
        acc(x, mt @ g)

    return _node(matrix @ x.values, (x,), backward)


# ---------------------------------------------------------------------------
# reductions and composites


def reduce_sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    def backward(g, acc):
        if axis is None:
            acc(a, np.broadcast_to(g, a.values.shape).copy())
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            acc(a, np.broadcast_to(g, a.values.shape).copy())

    return _node(a.values.sum(axis=axis, keepdims=keepdims), (a,), backward)


def reduce_mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = a.values.size
    else:
        count = a.values.shape[axis]

    def backward(g, acc):
        if axis is None:
            acc(a, np.broadcast_to(g / count, a.values.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            acc(a, np.broadcast_to(gg / count, a.values.shape).copy())

    return _node(a.values.mean(axis=axis, keepdims=keepdims), (a,), backward)


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-8) -> Tensor:
    """Row-wise layer normalization over the last axis, optional affine pair."""
    mu = reduce_mean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = reduce_mean(square(centered), axis=-1, keepdims=True)
    normed = div(centered, sqrt(add(var, constant(eps))))
    if gain is not None:
        normed = mul(normed, gain)
    if bias is not None:
        normed = add(normed, bias)
    return normed


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor):
    order, seen, stack = [], set(), [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def grad(loss: Tensor, params) -> list[np.ndarray]:
    """Gradient of a scalar loss w.r.t. each parameter (zeros if unreachable).

    Pure: neither the loss graph nor the parameters are modified.
    """
    if loss.values.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.values.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}

    def acc(node, g):
        # Constants and frozen leaves take no gradient; this keeps frozen
        # parameters at exactly zero and skips useless accumulation work.
        if node._backward is None and not node.requires_grad:
            return
        # Stored gradients are never mutated in place anywhere in the engine,
        # so adopting the producer's array (or a view of it) is safe.
        key = id(node)
        if key in grads:
            grads[key] = grads[key] + g
        else:
            grads[key] = np.asarray(g, dtype=np.float64)

    for node in reversed(_topo_order(loss)):
        if node._backward is None:
            continue
        g = grads.get(id(node))
        if g is None:
            continue
        node._backward(g, acc)
    return [grads.get(id(p), np.zeros_like(p.values)) for p in params]


def finite_difference_grad(f, params, h: float = 1e-6) -> list[np.ndarray]:
    """Central-difference gradient of ``f(params) -> float`` per entry."""
    if h <= 0:
        raise ValueError("h must be positive")
    out = []
    for p in params:
        g = np.zeros_like(p.values)
        flat = p.values.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(params))
            flat[i] = orig - h
            fm = float(f(params))
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise FloatingPointError(
                    f"non-finite evaluation at parameter {p.name!r} entry {i}")
            gflat[i] = (fp - fm) / (2.0 * h)
        out.append(g)
    return out


# ---------------------------------------------------------------------------
# Adam


class AdamState:
    """Per-parameter first/second moments plus the shared step counter."""

    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.first_moment = [np.zeros_like(p.values) for p in params]
        self.second_moment = [np.zeros_like(p.values) for p in params]


def adam_step(params, grads, state: AdamState, lr: float):
    """One Adam update with bias correction; parameters updated in place."""
    if len(params) != len(grads):
        raise ValueError("params and grads length mismatch")
    for p, g in zip(params, grads):
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {p.name!r}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.values -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state

"""Reverse-mode automatic differentiation over numpy arrays.

A Value wraps an N-d array and records enough structure to backpropagate a
scalar loss to every reachable leaf with requires_grad. Compute is float32
by default; gradient checking rebuilds the graph from float64 leaves.

Gradients ACCUMULATE into .grad across backward() calls; callers that step
an optimizer are responsible for zeroing between updates.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float32


class Value:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, parents=(), vjp=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        # graph edges are only kept where a gradient can flow
        self._parents = parents if self.requires_grad else ()
        self._vjp = vjp if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Value(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def const(data, dtype=None) -> Value:
    return Value(np.asarray(data, dtype=dtype or DEFAULT_DTYPE))


def param(data, dtype=None) -> Value:
    return Value(np.asarray(data, dtype=dtype or DEFAULT_DTYPE), requires_grad=True)


def as_value(x) -> Value:
    return x if isinstance(x, Value) else const(x)


def backward(output: Value) -> None:
    """Reverse accumulation from a scalar output. Shared inputs sum."""
    if output.size != 1:
        raise ValueError(f"backward requires a scalar output, got shape {output.shape}")
    order = _topo_order(output)
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    for node in order:
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
        if node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def _topo_order(root: Value) -> list[Value]:
    """Reverse topological order (root first), iterative."""
    order, visited = [], set()
    stack: list[tuple[Value, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    order.reverse()
    return order


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad over the axes that broadcasting expanded."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --------------------------------------------------------------------------
# arithmetic
# --------------------------------------------------------------------------

def add(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    na, nb = a.requires_grad, b.requires_grad
    return Value(a.data + b.data, parents=(a, b),
                 vjp=lambda g: (_unbroadcast(g, a.data.shape) if na else None,
                                _unbroadcast(g, b.data.shape) if nb else None))


def sub(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    na, nb = a.requires_grad, b.requires_grad
    return Value(a.data - b.data, parents=(a, b),
                 vjp=lambda g: (_unbroadcast(g, a.data.shape) if na else None,
                                _unbroadcast(-g, b.data.shape) if nb else None))


def mul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    na, nb = a.requires_grad, b.requires_grad
    return Value(a.data * b.data, parents=(a, b),
                 vjp=lambda g: (_unbroadcast(g * b.data, a.data.shape) if na else None,
                                _unbroadcast(g * a.data, b.data.shape) if nb else None))


def div(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    na, nb = a.requires_grad, b.requires_grad
    return Value(a.data / b.data, parents=(a, b),
                 vjp=lambda g: (_unbroadcast(g / b.data, a.data.shape) if na else None,
                                _unbroadcast(-g * a.data / (b.data * b.data),
                                             b.data.shape) if nb else None))


def scale(a, s: float) -> Value:
    """Multiplication by a non-learned scalar."""
    a = as_value(a)
    return Value(a.data * s, parents=(a,), vjp=lambda g: (g * s,))


def matmul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    out = a.data @ b.data
    na, nb = a.requires_grad, b.requires_grad

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape) if na else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape) if nb else None
        return (ga, gb)

    return Value(out, parents=(a, b), vjp=vjp)


def vsum(a, axis=None, keepdims: bool = False) -> Value:
    a = as_value(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return Value(np.asarray(out), parents=(a,), vjp=vjp)


def vmean(a, axis=None, keepdims: bool = False) -> Value:
    a = as_value(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(vsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def vexp(a) -> Value:
    a = as_value(a)
    out = np.exp(a.data)
    return Value(out, parents=(a,), vjp=lambda g: (g * out,))


def vlog(a) -> Value:
    a = as_value(a)
    return Value(np.log(a.data), parents=(a,), vjp=lambda g: (g / a.data,))


def vsqrt(a) -> Value:
    a = as_value(a)
    out = np.sqrt(a.data)
    return Value(out, parents=(a,), vjp=lambda g: (g * 0.5 / out,))


def vmaximum(a, floor: float) -> Value:
    """Elementwise max against a constant floor."""
    a = as_value(a)
    out = np.maximum(a.data, floor)
    return Value(out, parents=(a,), vjp=lambda g: (g * (a.data > floor),))


# --------------------------------------------------------------------------
# shape ops
# --------------------------------------------------------------------------

def reshape(a, shape) -> Value:
    a = as_value(a)
    return Value(a.data.reshape(shape), parents=(a,),
                 vjp=lambda g: (g.reshape(a.data.shape),))


def transpose(a, axes) -> Value:
    a = as_value(a)
    inverse = np.argsort(axes)
    return Value(a.data.transpose(axes), parents=(a,),
                 vjp=lambda g: (g.transpose(inverse),))


def concat(values, axis: int = 0) -> Value:
    values = [as_value(v) for v in values]
    sizes = [v.data.shape[axis] for v in values]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([v.data for v in values], axis=axis)
    return Value(out, parents=tuple(values),
                 vjp=lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(values, axis: int = 0) -> Value:
    values = [as_value(v) for v in values]
    out = np.stack([v.data for v in values], axis=axis)
    return Value(out, parents=tuple(values),
                 vjp=lambda g: tuple(np.moveaxis(g, axis, 0)))


def gather_rows(a, idx) -> Value:
    """Row lookup a[idx] along axis 0; doubles as embedding lookup."""
    a = as_value(a)
    idx = np.asarray(idx, dtype=np.int64)

    def vjp(g):
        da = np.zeros_like(a.data)
        np.add.at(da, idx, g)
        return (da,)

    return Value(a.data[idx], parents=(a,), vjp=vjp)


def mask_rows(a, idx, row) -> Value:
    """Replace rows a[idx] with a learned row vector (broadcast)."""
    a, row = as_value(a), as_value(row)
    idx = np.asarray(idx, dtype=np.int64)
    out = a.data.copy()
    out[idx] = row.data

    def vjp(g):
        da = g.copy()
        da[idx] = 0.0
        drow = g[idx].sum(axis=0) if len(idx) else np.zeros_like(row.data)
        return (da, drow)

    return Value(out, parents=(a, row), vjp=vjp)


# --------------------------------------------------------------------------
# neural primitives
# --------------------------------------------------------------------------

def softmax(a, axis: int = -1) -> Value:
    a = as_value(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return Value(out, parents=(a,), vjp=vjp)


def log_softmax(a, axis: int = -1) -> Value:
    a = as_value(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def vjp(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return Value(out, parents=(a,), vjp=vjp)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Value:
    """Normalize over the last axis, then apply learnable gain and bias."""
    a, gain, bias = as_value(a), as_value(gain), as_value(bias)
    mean = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mean) * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        da = (dxhat - m1 - xhat * m2) * inv
        axes = tuple(range(g.ndim - 1))
        return (da, (g * xhat).sum(axis=axes), g.sum(axis=axes))

    return Value(out, parents=(a, gain, bias), vjp=vjp)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a) -> Value:
    """Exact (erf) GELU."""
    a = as_value(a)
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out = a.data * cdf

    def vjp(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
        return (g * (cdf + a.data * pdf),)

    return Value(out.astype(a.data.dtype), parents=(a,), vjp=vjp)


def dropout(a, p: float, rng: np.random.Generator | None, train: bool) -> Value:
    """Inverted dropout: eval mode is the identity."""
    if not train or p == 0.0:
        return as_value(a)
    a = as_value(a)
    keep = (rng.random(a.data.shape) >= p) / (1.0 - p)
    keep = keep.astype(a.data.dtype)
    return Value(a.data * keep, parents=(a,), vjp=lambda g: (g * keep,))


def _row_norm(a, eps: float, keepdims: bool) -> Value:
    # floored norm: exactly scale-invariant whenever |row| > eps
    sq = add(vsum(mul(a, a), axis=-1, keepdims=keepdims), 1e-30)
    return vmaximum(vsqrt(sq), eps)


def cosine(a, b, eps: float = 1e-8) -> Value:
    """Cosine similarity along the last axis of same-shape inputs."""
    a, b = as_value(a), as_value(b)
    num = vsum(mul(a, b), axis=-1)
    return div(num, mul(_row_norm(a, eps, False), _row_norm(b, eps, False)))


def cosine_pairs(a, b, eps: float = 1e-8) -> Value:
    """All-pairs cosine similarity: (N x e, K x e) -> N x K."""
    a, b = as_value(a), as_value(b)
    return matmul(div(a, _row_norm(a, eps, True)),
                  transpose(div(b, _row_norm(b, eps, True)), (1, 0)))


def cross_entropy(logits, targets) -> Value:
    """Per-row negative log-likelihood from unnormalized logits (N x k)."""
    logits = as_value(logits)
    targets = np.asarray(targets, dtype=np.int64)
    n = logits.data.shape[0]
    if len(targets) != n:
        raise ValueError(f"{len(targets)} targets for {n} rows")
    if len(targets) and (targets.min() < 0 or targets.max() >= logits.data.shape[1]):
        raise ValueError("target outside [0, k)")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    nll = -logp[np.arange(n), targets]

    def vjp(g):
        soft = np.exp(logp)
        soft[np.arange(n), targets] -= 1.0
        return (soft * g[:, None],)

    return Value(nll, parents=(logits,), vjp=vjp)


# --------------------------------------------------------------------------
# verification
# --------------------------------------------------------------------------

def grad_check(f, inputs: list[Value], eps: float = 1e-5,
               max_coords: int = 64, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    Rebuilds the graph from float64 copies of `inputs`; checks up to
    max_coords randomly chosen coordinates per input (all, if fewer).
    """
    leaves = [Value(np.ascontiguousarray(v.data, dtype=np.float64), requires_grad=True)
              for v in inputs]
    out = f(*leaves)
    if out.size != 1:
        raise ValueError("grad_check needs a scalar function")
    if not np.isfinite(out.data).all():
        raise ValueError("non-finite function value")
    backward(out)

    rng = np.random.default_rng(seed)
    max_rel = 0.0
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        n = leaf.data.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, max_coords, replace=False)
        flat = leaf.data.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            f_plus = float(f(*leaves).data)
            flat[c] = orig - eps
            f_minus = float(f(*leaves).data)
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = analytic.reshape(-1)[c]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            max_rel = max(max_rel, rel)
    return max_rel

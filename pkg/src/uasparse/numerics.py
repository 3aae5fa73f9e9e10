"""Small dense-tensor autodiff on top of numpy.

Each op builds its output ``Tensor`` with a reference to its parents and a
closure that pushes the output gradient back to them. ``Tensor.backward``
walks that recorded graph in reverse topological order.

Tensors keep the dtype of their data. Model weights are float32; tests cast
to float64 for tight gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772
BCE_EPS = 1e-7


class ShapeMismatch(ValueError):
    pass


class IndexOutOfRange(IndexError):
    pass


class MissingGradient(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.dtype), -1.0))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float32))


def _result(data, parents, backward):
    parents = tuple(parents)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot broadcast {a.shape} with {b.shape}") from exc


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward)


def scale(a, factor):
    factor = float(factor)

    def backward(g):
        return (g * np.asarray(factor, dtype=g.dtype),)

    return _result(a.data * np.asarray(factor, dtype=a.dtype), (a,), backward)


def matmul(a, b):
    """Matrix product; leading dimensions broadcast like ``numpy.matmul``."""
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul {a.shape} x {b.shape}")

    def backward(g):
        g = np.ascontiguousarray(g)
        ga = g @ np.ascontiguousarray(np.swapaxes(b.data, -1, -2))
        if b.data.ndim == 2:
            # shared weight: fold the leading dims into one big product
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.ascontiguousarray(np.swapaxes(a.data, -1, -2)) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, (a, b), backward)


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _result(np.transpose(a.data, axes), (a,), backward)


def reshape(a, shape):
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot reshape {a.shape} to {shape}") from exc

    def backward(g):
        return (g.reshape(a.shape),)

    return _result(out, (a,), backward)


def flatten(a, start_axis=1):
    return reshape(a, a.shape[:start_axis] + (-1,))


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tensors, backward)


def sum_(a, axis=None, keepdims=False):
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims=False):
    count = a.data.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def relu(a):
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return _result(a.data * mask, (a,), backward)


def selu(a):
    x = a.data
    neg = SELU_LAMBDA * SELU_ALPHA * np.exp(np.minimum(x, 0))
    out = np.where(x > 0, SELU_LAMBDA * x, neg - SELU_LAMBDA * SELU_ALPHA).astype(x.dtype)

    def backward(g):
        return (g * np.where(x > 0, SELU_LAMBDA, neg).astype(x.dtype),)

    return _result(out, (a,), backward)


def _flush_subnormal(x):
    # subnormal floats are orders of magnitude slower in BLAS kernels
    if x.dtype.kind == "f":
        x[np.abs(x) < np.finfo(x.dtype).tiny] = 0
    return x


def _softmax_data(x, axis, mask):
    if mask is None:
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=axis, keepdims=True)
    mask = np.broadcast_to(mask, x.shape)
    any_valid = mask.any(axis=axis, keepdims=True)
    # rows with no valid entry fall back to a uniform distribution
    mask = np.where(any_valid, mask, True)
    masked = np.where(mask, x, -np.inf)
    shifted = masked - masked.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    return np.where(any_valid, y, np.asarray(1.0 / x.shape[axis], dtype=x.dtype)).astype(x.dtype)


def softmax(a, axis=-1, mask=None):
    """Softmax along ``axis``.

    ``mask`` (boolean, broadcastable) marks valid entries; the rest get
    exactly zero weight. A slice with no valid entry becomes uniform and
    passes no gradient.
    """
    y = _flush_subnormal(_softmax_data(a.data, axis, mask))
    frozen = None
    if mask is not None:
        frozen = ~np.broadcast_to(mask, a.shape).any(axis=axis, keepdims=True)

    def backward(g):
        gx = y * (g - (g * y).sum(axis=axis, keepdims=True))
        if frozen is not None:
            gx = np.where(frozen, 0, gx).astype(gx.dtype)
        return (_flush_subnormal(gx),)

    return _result(y, (a,), backward)


def layer_norm(a, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = x.shape[-1]

    def backward(g):
        gxhat = g * gamma.data
        gx = inv / n * (n * gxhat - gxhat.sum(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True))
        ggamma = _unbroadcast(g * xhat, gamma.shape)
        gbeta = _unbroadcast(g, beta.shape)
        return gx.astype(x.dtype), ggamma, gbeta

    return _result(out.astype(x.dtype), (a, gamma, beta), backward)


def dropout(a, p, rng, training=True):
    """Inverted dropout; identity when not training or ``p == 0``."""
    if not training or p == 0:
        return a
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / np.asarray(1 - p, dtype=a.dtype)

    def backward(g):
        return (g * keep,)

    return _result(a.data * keep, (a,), backward)


def cross_entropy_loss(logits, target_index):
    """Mean negative log-softmax at the target index.

    ``logits`` is ``[C]`` with an integer target, or ``[B, C]`` with a
    length-B integer array of targets.
    """
    x = logits.data
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    targets = np.atleast_1d(np.asarray(target_index))
    if targets.shape[0] != x2.shape[0]:
        raise ShapeMismatch(f"{targets.shape[0]} targets for {x2.shape[0]} rows")
    n_classes = x2.shape[1]
    if np.any(targets < 0) or np.any(targets >= n_classes):
        raise IndexOutOfRange(f"target outside [0, {n_classes})")
    shifted = x2 - x2.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    rows = np.arange(x2.shape[0])
    loss = -logp[rows, targets].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[rows, targets] -= 1
        grad = grad * (g / x2.shape[0])
        return (grad.reshape(x.shape).astype(x.dtype),)

    return _result(np.asarray(loss, dtype=x.dtype), (logits,), backward)


def binary_cross_entropy_loss(probs, target_onehot):
    """Mean elementwise BCE over clamped probabilities."""
    target_onehot = _as_tensor(target_onehot, probs.dtype)
    if probs.shape != target_onehot.shape:
        raise ShapeMismatch(f"probs {probs.shape} vs targets {target_onehot.shape}")
    p = probs.data
    t = target_onehot.data
    pc = np.clip(p, BCE_EPS, 1 - BCE_EPS)
    loss = -(t * np.log(pc) + (1 - t) * np.log(1 - pc)).mean()
    inside = (p >= BCE_EPS) & (p <= 1 - BCE_EPS)

    def backward(g):
        grad = (-(t / pc) + (1 - t) / (1 - pc)) * inside * (g / p.size)
        return grad.astype(p.dtype), None

    return _result(np.asarray(loss, dtype=p.dtype), (probs, target_onehot), backward)


@dataclass
class SgdConfig:
    learning_rate: float
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


def sgd_step(params, config):
    """p <- p - lr * (grad + weight_decay * p), then clear the gradients."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise MissingGradient(f"parameter {p.name or p.shape} has no gradient")
    lr = np.asarray(config.learning_rate)
    wd = np.asarray(config.weight_decay)
    for p in params:
        if config.learning_rate != 0:
            update = p.grad + wd.astype(p.dtype) * p.data if config.weight_decay else p.grad
            p.data -= lr.astype(p.dtype) * update.astype(p.dtype)
        p.grad = None

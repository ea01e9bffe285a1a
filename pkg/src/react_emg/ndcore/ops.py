"""Differentiable elementwise, reduction and normalisation ops."""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .tensor import Tensor, _unbroadcast, as_tensor, make_node

_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def matmul(a, b):
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_node(ad @ bd, (a, b), bw, "matmul")


def linear(x, weight, bias=None):
    """``x @ weight + bias`` for ``x`` of shape (..., in) and weight (in, out).

    Leading dimensions are flattened so the weight gradient is one GEMM.
    """
    x = as_tensor(x)
    lead = x.shape[:-1]
    xd = x.data.reshape(-1, x.shape[-1])
    wd = weight.data
    out = xd @ wd
    if bias is not None:
        out = out + bias.data
    out = out.reshape(lead + (wd.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(x.shape) if x.requires_grad else None
        gw = xd.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, bw, "linear")


def exp(x):
    y = np.exp(x.data)
    return make_node(y, (x,), lambda g: (g * y,), "exp")


def log(x):
    a = x.data
    return make_node(np.log(a), (x,), lambda g: (g / a,), "log")


def abs(x):  # noqa: A001 - mirrors numpy naming
    a = x.data
    return make_node(np.abs(a), (x,), lambda g: (g * np.sign(a),), "abs")


def sqrt(x):
    y = np.sqrt(x.data)
    return make_node(y, (x,), lambda g: (g * 0.5 / y,), "sqrt")


def square(x):
    a = x.data
    return make_node(a * a, (x,), lambda g: (2.0 * g * a,), "square")


def sin(x):
    a = x.data
    return make_node(np.sin(a), (x,), lambda g: (g * np.cos(a),), "sin")


def cos(x):
    a = x.data
    return make_node(np.cos(a), (x,), lambda g: (-g * np.sin(a),), "cos")


def tanh(x):
    y = np.tanh(x.data)
    return make_node(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(x):
    y = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    return make_node(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(x):
    a = x.data
    return make_node(np.maximum(a, 0.0), (x,), lambda g: (g * (a > 0),), "relu")


def gelu(x):
    """Exact GELU, ``x * Phi(x)``."""
    a = x.data
    cdf = 0.5 * (1.0 + erf(a / _SQRT2))

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * a * a)
        return (g * (cdf + a * pdf),)

    return make_node(a * cdf, (x,), bw, "gelu")


def softmax(x, axis=-1):
    a = x.data
    e = np.exp(a - a.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_node(y, (x,), bw, "softmax")


def log_softmax(x, axis=-1):
    a = x.data
    shifted = a - a.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return make_node(y, (x,), bw, "log_softmax")


def layer_norm(x, weight=None, bias=None, axis=-1, eps=1e-5):
    """Normalise over ``axis`` (population variance), then apply the affine."""
    x = as_tensor(x)
    ax = axis % x.ndim
    n = x.shape[ax]
    if n == 0:
        raise ValueError("layer_norm over an axis of size 0")
    a = x.data
    mu = a.mean(axis=ax, keepdims=True)
    xc = a - mu
    var = (xc * xc).mean(axis=ax, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    bshape = [1] * x.ndim
    bshape[ax] = n
    w = None if weight is None else weight.data.reshape(bshape)
    y = xhat if w is None else xhat * w
    if bias is not None:
        y = y + bias.data.reshape(bshape)
    red = tuple(i for i in range(x.ndim) if i != ax)

    def bw(g):
        dxhat = g if w is None else g * w
        gx = None
        if x.requires_grad:
            gx = inv * (dxhat - dxhat.mean(axis=ax, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=ax, keepdims=True))
        out = [gx]
        if weight is not None:
            out.append((g * xhat).sum(axis=red) if weight.requires_grad else None)
        if bias is not None:
            out.append(g.sum(axis=red) if bias.requires_grad else None)
        return out

    parents = (x,) + tuple(p for p in (weight, bias) if p is not None)
    return make_node(y, parents, bw, "layer_norm")


def dropout(x, rate, train, rng=None):
    """Inverted dropout; the identity when ``train`` is false or ``rate`` is 0."""
    if not train or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return make_node(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_node(np.concatenate([t.data for t in tensors], axis=axis),
                     tuple(tensors), bw, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return make_node(np.stack([t.data for t in tensors], axis=axis),
                     tuple(tensors), bw, "stack")


def norm(x, axis=-1):
    """Euclidean norm along ``axis`` with a zero subgradient at the origin."""
    a = x.data
    n = np.sqrt((a * a).sum(axis=axis))

    def bw(g):
        nk = np.expand_dims(n, axis)
        safe = np.where(nk > 0, nk, 1.0)
        return (np.where(nk > 0, a / safe, 0.0) * np.expand_dims(g, axis),)

    return make_node(n, (x,), bw, "norm")


def where(cond, a, b):
    a = as_tensor(a)
    b = as_tensor(b)
    cond = np.asarray(cond, dtype=bool)

    def bw(g):
        return (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                _unbroadcast(np.where(cond, 0.0, g), b.shape))

    return make_node(np.where(cond, a.data, b.data), (a, b), bw, "where")


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under ``logits``."""
    labels = np.asarray(labels)
    lp = log_softmax(logits, axis=-1)
    picked = lp[np.arange(len(labels)), labels]
    return -picked.mean()


__all__ = [
    "Tensor", "abs", "concat", "cos", "cross_entropy", "dropout", "exp", "gelu",
    "layer_norm", "linear", "log", "log_softmax", "matmul", "norm", "relu",
    "sigmoid", "sin", "softmax", "sqrt", "square", "stack", "tanh", "where",
]

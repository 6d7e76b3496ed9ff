"""Differentiable building blocks with explicit forward and backward passes.

Every ``*_forward`` returns ``(output, cache)``; the matching ``*_backward``
consumes the upstream gradient and the cache and returns gradients with
respect to every input and parameter, in argument order.  All arithmetic is
float64.  Dense-style ops act on the last axis and broadcast over the rest.
"""
from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when an op receives incompatible shapes."""


def _check(cond: bool, op: str, msg: str) -> None:
    if not cond:
        raise ShapeError(f"{op}: {msg}")


# -- affine -----------------------------------------------------------------

def dense_forward(x, W, b):
    _check(W.ndim == 2 and b.shape == (W.shape[1],), "dense",
           f"weight {W.shape} / bias {b.shape} inconsistent")
    _check(x.shape[-1] == W.shape[0], "dense",
           f"input last dim {x.shape[-1]} != weight rows {W.shape[0]}")
    return x @ W + b, (x, W)


def dense_backward(dy, cache):
    x, W = cache
    x2 = x.reshape(-1, W.shape[0])
    dy2 = dy.reshape(-1, W.shape[1])
    dW = x2.T @ dy2
    db = dy2.sum(axis=0)
    dx = dy @ W.T
    return dx, dW, db


# -- activations ------------------------------------------------------------

def elu_forward(x):
    y = np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))
    return y, (x, y)


def elu_backward(dy, cache):
    x, y = cache
    return dy * np.where(x > 0, 1.0, y + 1.0)


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def glu_forward(gate, value):
    """Gated linear unit: ``sigmoid(gate) * value``."""
    _check(gate.shape == value.shape, "glu",
           f"gate {gate.shape} and value {value.shape} differ")
    s = sigmoid(gate)
    return s * value, (s, value)


def glu_backward(dy, cache):
    s, value = cache
    dgate = dy * value * s * (1.0 - s)
    dvalue = dy * s
    return dgate, dvalue


# -- normalisation ----------------------------------------------------------

def layernorm_forward(x, gamma, beta, eps=1e-8):
    _check(gamma.shape == (x.shape[-1],) and beta.shape == gamma.shape,
           "layernorm", f"gain {gamma.shape} does not match width {x.shape[-1]}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv, gamma)


def layernorm_backward(dy, cache):
    xhat, inv, gamma = cache
    d = xhat.shape[-1]
    dgamma = (dy * xhat).reshape(-1, d).sum(axis=0)
    dbeta = dy.reshape(-1, d).sum(axis=0)
    g = dy * gamma
    dx = inv * (g - g.mean(axis=-1, keepdims=True)
                - xhat * (g * xhat).mean(axis=-1, keepdims=True))
    return dx, dgamma, dbeta


def softmax_forward(x, mask=None):
    """Softmax over the last axis.  ``mask`` (broadcastable, True = keep)
    removes positions from the normalisation entirely."""
    if mask is not None:
        mask = np.broadcast_to(mask, x.shape)
        if not mask.any(axis=-1).all():
            raise ShapeError("softmax: every position masked for some row")
        x = np.where(mask, x, -np.inf)
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    y = e / e.sum(axis=-1, keepdims=True)
    return y, y


def softmax_backward(dy, cache):
    y = cache
    return y * (dy - (dy * y).sum(axis=-1, keepdims=True))


def dropout_forward(x, rate, rng=None, train=False):
    """Inverted dropout; identity (and no RNG draw) unless training."""
    if not train or rate <= 0.0:
        return x, None
    if rng is None:
        raise ValueError("dropout: training mode needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep, keep


def dropout_backward(dy, cache):
    return dy if cache is None else dy * cache


def embedding_forward(idx, table):
    idx = np.asarray(idx)
    _check(np.issubdtype(idx.dtype, np.integer), "embedding", "indices must be integers")
    _check(idx.size == 0 or (idx.min() >= 0 and idx.max() < table.shape[0]), "embedding",
           f"index out of range for vocabulary of {table.shape[0]}")
    return table[idx], (idx, table.shape)


def embedding_backward(dy, cache):
    idx, shape = cache
    dtable = np.zeros(shape)
    np.add.at(dtable, idx.reshape(-1), dy.reshape(-1, shape[1]))
    return dtable


# -- elementwise / structural -----------------------------------------------

def add_forward(a, b):
    _check(a.shape == b.shape, "add", f"{a.shape} vs {b.shape}")
    return a + b, None


def add_backward(dy, cache):
    return dy, dy


def multiply_forward(a, b):
    _check(a.shape == b.shape, "multiply", f"{a.shape} vs {b.shape}")
    return a * b, (a, b)


def multiply_backward(dy, cache):
    a, b = cache
    return dy * b, dy * a


def concat_forward(arrays, axis=-1):
    ref = arrays[0].shape
    ax = axis % len(ref)
    for a in arrays[1:]:
        _check(a.ndim == len(ref) and all(
            s == r for i, (s, r) in enumerate(zip(a.shape, ref)) if i != ax),
            "concat", f"{a.shape} incompatible with {ref} on axis {axis}")
    sizes = [a.shape[ax] for a in arrays]
    return np.concatenate(arrays, axis=ax), (np.cumsum(sizes)[:-1], ax)


def concat_backward(dy, cache):
    splits, ax = cache
    return np.split(dy, splits, axis=ax)

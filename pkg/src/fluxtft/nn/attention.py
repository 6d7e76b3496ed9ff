"""Scaled dot-product attention with an explicit backward pass."""
from __future__ import annotations

import numpy as np

from .primitives import ShapeError, softmax_backward, softmax_forward


def causal_mask(n_query: int, n_key: int) -> np.ndarray:
    """Boolean (n_query, n_key) mask; query ``j`` sits at key position
    ``n_key - n_query + j`` and may see every key up to and including it."""
    offset = n_key - n_query
    return np.arange(n_key)[None, :] <= (np.arange(n_query)[:, None] + offset)


def scaled_dot_attention(q, k, v, mask=None):
    """``q`` (..., Tq, dk), ``k`` (..., Tk, dk), ``v`` (..., Tk, dv).

    ``mask`` broadcasts to (..., Tq, Tk), True where attention is allowed.
    Returns ``(out, weights, cache)``.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} incompatible")
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = (q @ np.swapaxes(k, -1, -2)) * scale
    try:
        w, sm_cache = softmax_forward(scores, mask)
    except ShapeError:
        raise ShapeError("attention: every key position masked for some query") from None
    return w @ v, w, (q, k, v, w, sm_cache, scale)


def scaled_dot_attention_backward(dout, cache, dweights=None):
    """Returns ``(dq, dk, dv)``; ``dweights`` lets callers inject gradient
    arriving directly at the attention weights."""
    q, k, v, w, sm_cache, scale = cache
    dw = dout @ np.swapaxes(v, -1, -2)
    if dweights is not None:
        dw = dw + dweights
    dv = np.swapaxes(w, -1, -2) @ dout
    dscores = softmax_backward(dw, sm_cache) * scale
    dq = dscores @ k
    dk = np.swapaxes(dscores, -1, -2) @ q
    return dq, dk, dv


def _split_heads(x, n_heads):
    *lead, T, d = x.shape
    if d % n_heads:
        raise ShapeError(f"multihead_attention: width {d} not divisible by {n_heads} heads")
    return np.moveaxis(x.reshape(*lead, T, n_heads, d // n_heads), -2, -3)


def _merge_heads(x):
    x = np.moveaxis(x, -3, -2)
    return x.reshape(*x.shape[:-2], -1)


def multihead_attention(queries, keys, values, n_heads, mask=None):
    """Plain multi-head attention on pre-projected inputs (width split into
    heads).  Returns ``(output, weights, cache)`` with weights shaped
    (..., heads, Tq, Tk)."""
    q = _split_heads(queries, n_heads)
    k = _split_heads(keys, n_heads)
    v = _split_heads(values, n_heads)
    out, w, cache = scaled_dot_attention(q, k, v, mask)
    return _merge_heads(out), w, (cache, n_heads)


def multihead_attention_backward(dout, cache):
    inner, n_heads = cache
    dq, dk, dv = scaled_dot_attention_backward(_split_heads(dout, n_heads), inner)
    return _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)

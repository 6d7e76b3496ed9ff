"""Single-layer LSTM with cached activations for backpropagation through time.

Gate layout along the last axis of the fused weights is (input, forget,
cell-candidate, output), each block ``hidden`` wide.
"""
from __future__ import annotations

import numpy as np

from .primitives import ShapeError, sigmoid


def lstm_cell_step(x, h_prev, c_prev, Wx, Wh, b):
    hidden = Wh.shape[0]
    if Wx.shape[1] != 4 * hidden or Wh.shape != (hidden, 4 * hidden) or b.shape != (4 * hidden,):
        raise ShapeError(f"lstm: weights {Wx.shape}/{Wh.shape}/{b.shape} inconsistent")
    if x.shape[-1] != Wx.shape[0] or h_prev.shape[-1] != hidden or c_prev.shape != h_prev.shape:
        raise ShapeError(f"lstm: input {x.shape} / state {h_prev.shape} mismatch")
    z = x @ Wx + h_prev @ Wh + b
    i = sigmoid(z[..., :hidden])
    f = sigmoid(z[..., hidden:2 * hidden])
    g = np.tanh(z[..., 2 * hidden:3 * hidden])
    o = sigmoid(z[..., 3 * hidden:])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, c, (x, h_prev, c_prev, i, f, g, o, tc)


def lstm_cell_backward(dh, dc, cache, Wx, Wh):
    """Returns ``(dx, dh_prev, dc_prev, dWx, dWh, db)``."""
    x, h_prev, c_prev, i, f, g, o, tc = cache
    do = dh * tc
    dc = dc + dh * o * (1.0 - tc * tc)
    di = dc * g
    dg = dc * i
    df = dc * c_prev
    dc_prev = dc * f
    dz = np.concatenate([
        di * i * (1.0 - i),
        df * f * (1.0 - f),
        dg * (1.0 - g * g),
        do * o * (1.0 - o),
    ], axis=-1)
    dWx = x.T @ dz
    dWh = h_prev.T @ dz
    db = dz.sum(axis=0)
    dx = dz @ Wx.T
    dh_prev = dz @ Wh.T
    return dx, dh_prev, dc_prev, dWx, dWh, db


def lstm_forward(xs, h0, c0, Wx, Wh, b):
    """Run over ``xs`` shaped (batch, time, features).

    Returns ``(hs, (h_T, c_T), cache)`` with ``hs`` shaped (batch, time, hidden).
    """
    B, T, _ = xs.shape
    hs = np.empty((B, T, Wh.shape[0]))
    h, c = h0, c0
    caches = []
    for t in range(T):
        h, c, cache = lstm_cell_step(xs[:, t], h, c, Wx, Wh, b)
        hs[:, t] = h
        caches.append(cache)
    return hs, (h, c), caches


def lstm_backward(dhs, dh_last, dc_last, caches, Wx, Wh):
    """BPTT.  ``dh_last``/``dc_last`` are gradients flowing into the final
    state from downstream consumers (e.g. a decoder LSTM).

    Returns ``(dxs, dh0, dc0, dWx, dWh, db)``.
    """
    B, T, _ = dhs.shape
    dxs = np.empty((B, T, Wx.shape[0]))
    dWx = np.zeros_like(Wx)
    dWh = np.zeros_like(Wh)
    db = np.zeros(Wh.shape[1])
    dh, dc = dh_last, dc_last
    for t in reversed(range(T)):
        dx, dh, dc, gWx, gWh, gb = lstm_cell_backward(dhs[:, t] + dh, dc, caches[t], Wx, Wh)
        dxs[:, t] = dx
        dWx += gWx
        dWh += gWh
        db += gb
    return dxs, dh, dc, dWx, dWh, db

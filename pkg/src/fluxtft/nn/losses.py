"""Pinball (quantile) loss."""
from __future__ import annotations

import numpy as np


def _check_levels(quantiles) -> np.ndarray:
    q = np.atleast_1d(np.asarray(quantiles, dtype=np.float64))
    if np.any((q <= 0.0) | (q >= 1.0)):
        raise ValueError(f"quantile levels must lie in (0, 1), got {q.tolist()}")
    return q


def quantile_loss(y, y_hat, quantiles, mask=None):
    """Mean pinball loss and its gradient with respect to ``y_hat``.

    Parameters
    ----------
    y : array (...,)
        Observed values.
    y_hat : array (..., n_quantiles)
        Predicted quantiles, last axis aligned with ``quantiles``.
    quantiles : sequence of float
        Levels in (0, 1).
    mask : bool array (...,), optional
        False entries are dropped from both the mean and the gradient.

    Returns
    -------
    loss : float
    grad : array shaped like ``y_hat``
        At ``y == y_hat`` the subgradient is taken as 0.
    """
    q = _check_levels(quantiles)
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y_hat.shape != y.shape + (q.size,):
        raise ValueError(f"quantile_loss: y {y.shape} vs y_hat {y_hat.shape} for {q.size} levels")
    w = np.ones(y.shape) if mask is None else np.asarray(mask, dtype=np.float64)
    n = w.sum() * q.size
    if n == 0:
        return 0.0, np.zeros_like(y_hat)
    err = y[..., None] - y_hat
    per = np.maximum(q * err, (q - 1.0) * err) * w[..., None]
    grad = np.where(err > 0, -q, np.where(err < 0, 1.0 - q, 0.0)) * w[..., None] / n
    return float(per.sum() / n), grad

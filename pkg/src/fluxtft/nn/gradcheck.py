"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ParamStore


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)
    raw_errors: dict[str, float] = field(default_factory=dict)     # without the noise floor

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.errors.values())

    @property
    def failures(self) -> list[str]:
        return [k for k, e in self.errors.items() if not e < self.tolerance]


def relative_error(analytic, numeric, atol: float = 0.0) -> float:
    """Max absolute difference scaled by the tensor's gradient magnitude.

    Scaling per tensor (rather than per entry) keeps near-zero entries from
    turning round-off noise into spurious failures.  Differences below
    ``atol`` (the finite-difference noise floor) are not counted, which
    matters for gradients that vanish identically.
    """
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    excess = np.maximum(np.abs(analytic - numeric) - atol, 0.0)
    return float(excess.max(initial=0.0) / scale)


def gradient_check(loss_fn, store: ParamStore, eps=1e-6, tolerance=1e-5,
                   names=None, max_entries=None, seed=0) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``loss_fn(backward)`` must return the scalar loss; when ``backward`` is
    true it must also leave d(loss)/d(param) in ``store.grads`` (this
    function zeroes them first).  ``max_entries`` samples that many entries
    per tensor instead of perturbing every one.  Differences below the
    round-off floor of a central difference, ``8 * machine_eps * max(|L|, 1)
    / eps``, are ignored.
    """
    store.zero_grad()
    value = loss_fn(True)
    atol = 8.0 * np.finfo(np.float64).eps * max(abs(float(value)), 1.0) / eps
    analytic = {k: g.copy() for k, g in store.grads.items()}
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance)
    for name in names or list(store.params):
        p = store.params[name]
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + eps
            up = loss_fn(False)
            flat[i] = old - eps
            down = loss_fn(False)
            flat[i] = old
            numeric[j] = (up - down) / (2.0 * eps)
        a = analytic[name].reshape(-1)[idx]
        report.errors[name] = relative_error(a, numeric, atol)
        report.raw_errors[name] = relative_error(a, numeric)
    return report


def check_function(fn, inputs, eps=1e-6):
    """Numeric gradient of scalar ``fn(*inputs)`` for every input array."""
    grads = []
    for x in inputs:
        g = np.zeros_like(x)
        flat = x.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = fn(*inputs)
            flat[i] = old - eps
            down = fn(*inputs)
            flat[i] = old
            gflat[i] = (up - down) / (2.0 * eps)
        grads.append(g)
    return grads

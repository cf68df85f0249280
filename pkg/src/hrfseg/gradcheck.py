"""Finite-difference verification of analytic gradients.

The checker perturbs every coordinate of the input by +-h, evaluates the
scalar function under ``no_grad`` and compares the central difference
against the gradient produced by the recorded graph. Meant to run in
double precision.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, no_grad


def finite_difference_check(f, x, h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central diff| / max(1, |analytic|).

    ``f`` maps a Tensor to a 0-d Tensor and must be re-evaluable; ``x`` is
    the point to check (Tensor or array).
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    probe = Tensor(base.copy(), requires_grad=True)
    out = f(probe)
    if out.data.ndim != 0:
        raise ValueError(f"finite_difference_check needs a scalar function, got shape {out.shape}")
    out.backward()
    analytic = probe.grad.reshape(-1).copy()

    numeric = np.empty_like(analytic)
    flat = base.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = float(f(Tensor(base)).data)
            flat[i] = orig - h
            lo = float(f(Tensor(base)).data)
            flat[i] = orig
            numeric[i] = (hi - lo) / (2.0 * h)

    rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(rel.max())

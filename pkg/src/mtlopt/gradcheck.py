"""Central-finite-difference gradient checking.

The numeric side stays independent of the tape: it only calls a scalar
function of plain arrays, so it can certify any analytic gradient.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

FD_STEP = 1e-5


def central_difference(f: Callable[[], float], x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Gradient of f with respect to x by central differences.

    ``f`` must recompute the scalar from the current contents of ``x``;
    the array is perturbed in place and restored.
    """
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + step
        f_plus = f()
        flat[i] = saved - step
        f_minus = f()
        flat[i] = saved
        gflat[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute deviation over the combined scale of both gradients."""
    diff = np.abs(analytic - numeric).max(initial=0.0)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(diff / scale)

"""Compare reverse-mode gradients against central finite differences."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def numerical_grad(f: Callable[[], Tensor], x: Tensor, step: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar ``f()`` w.r.t. ``x`` (perturbed in place)."""
    grad = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(f().data)
            flat[i] = orig - step
            down = float(f().data)
            flat[i] = orig
            grad.reshape(-1)[i] = (up - down) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max component-wise |a - n| / max(|a|, |n|, floor)."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale)) if analytic.size else 0.0


def grad_check(f: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-4,
               floor: float = 1e-6) -> float:
    """Return the max relative error between ``backward`` and finite differences.

    ``f`` takes no arguments and closes over ``inputs``; every input must be a
    float64 leaf with ``requires_grad``.  Points where ``f`` is not
    differentiable (for instance relu exactly at 0) are not detected here and
    must be avoided by the caller.
    """
    for x in inputs:
        if x.data.dtype != np.float64:
            raise ValueError("grad_check needs float64 inputs")
        x.grad = None
    loss = f()
    if loss.size != 1:
        raise ValueError(f"grad_check: f must be scalar, got shape {loss.shape}")
    loss.backward()
    worst = 0.0
    for x in inputs:
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        worst = max(worst, relative_error(analytic, numerical_grad(f, x, step), floor))
    return worst

"""Central finite-difference check of analytic gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, gradients


def numeric_gradient(function: Callable[[Tensor], Tensor], point: np.ndarray, eps: float) -> np.ndarray:
    point = np.asarray(point, dtype=np.float64)
    grad = np.zeros_like(point)
    flat = point.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = _value(function, point)
        flat[i] = orig - eps
        down = _value(function, point)
        flat[i] = orig
        out[i] = (up - down) / (2 * eps)
    return grad


def _value(function, point) -> float:
    val = function(Tensor(point.copy())).item()
    if not np.isfinite(val):
        raise ValueError(f"grad_check: function returned non-finite value {val}")
    return val


def grad_check(function: Callable[[Tensor], Tensor], point, eps: float = 1e-6) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |analytic|, |numeric|)."""
    if eps <= 0:
        raise ValueError("grad_check: eps must be positive")
    point = np.array(point, dtype=np.float64)
    x = Tensor(point.copy(), requires_grad=True)
    loss = function(x)
    if not np.isfinite(loss.item()):
        raise ValueError(f"grad_check: function returned non-finite value {loss.item()}")
    (analytic,) = gradients(loss, [x])
    numeric = numeric_gradient(function, point, eps)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))

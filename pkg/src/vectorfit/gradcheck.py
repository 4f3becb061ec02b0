"""Central finite-difference checks for analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numeric_grad(loss_fn: Callable[[], Tensor], param: Tensor, h: float = 1e-4) -> np.ndarray:
    """Central differences of ``loss_fn()`` with respect to every entry of ``param``."""
    grad = np.zeros_like(param.data, dtype=np.float64)
    flat = param.data.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(loss_fn().data)
        flat[i] = orig - h
        fm = float(loss_fn().data)
        flat[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / denom)


def check_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-4
                    ) -> list[float]:
    """Relative error between backprop and finite differences, one entry per param."""
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    return [relative_error(a, numeric_grad(loss_fn, p, h)) for a, p in zip(analytic, params)]

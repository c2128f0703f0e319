"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def numerical_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x`` in place."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Max elementwise |a-b| / max(|a|+|b|, floor)."""
    denom = np.maximum(np.abs(a) + np.abs(b), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def check_gradients(build: Callable[[Sequence[Tensor]], Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Compare autodiff and finite-difference gradients of ``build(inputs)``.

    ``build`` must return a scalar tensor and be deterministic.  Returns the
    worst relative error over all inputs that require grad.
    """
    for t in inputs:
        t.grad = None
    backward(build(inputs))
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        num = numerical_grad(lambda: build(inputs).item(), t.values, h)
        ana = t.grad if t.grad is not None else np.zeros_like(t.values)
        worst = max(worst, relative_error(ana, num))
    return worst

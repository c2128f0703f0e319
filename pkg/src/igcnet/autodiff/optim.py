"""Adam with bias correction, plus global-norm gradient clipping."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor


class PoisonedStateError(FloatingPointError):
    """Non-finite gradient reached the optimizer; the step was not applied."""


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = float(np.sqrt(total))
    if max_norm is not None and max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """Apply one Adam update to ``params`` using their ``grad`` fields.

    Parameters without a gradient are left untouched (their moments too).
    """
    for i, p in enumerate(params):
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise PoisonedStateError(f"non-finite gradient for parameter {p.name or i}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i, p in enumerate(params):
        if p.grad is None:
            continue
        key = p.name or i
        m = state.m.get(key)
        if m is None:
            m = np.zeros_like(p.values)
            state.v[key] = np.zeros_like(p.values)
        v = state.v[key]
        m = b1 * m + (1.0 - b1) * p.grad
        v = b2 * v + (1.0 - b2) * p.grad * p.grad
        state.m[key], state.v[key] = m, v
        p.values -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)

"""Minimal reverse-mode automatic differentiation over dense float64 arrays."""
from . import ops
from .gradcheck import check_gradients, numerical_grad, relative_error
from .nn import Linear, Mlp, ParamStore
from .optim import AdamState, PoisonedStateError, adam_step, clip_grad_norm
from .tensor import (
    ContractError,
    DimensionError,
    DomainError,
    Tensor,
    backward,
    grad_enabled,
    no_grad,
)

__all__ = [
    "AdamState",
    "ContractError",
    "DimensionError",
    "DomainError",
    "Linear",
    "Mlp",
    "ParamStore",
    "PoisonedStateError",
    "Tensor",
    "adam_step",
    "backward",
    "check_gradients",
    "clip_grad_norm",
    "grad_enabled",
    "no_grad",
    "numerical_grad",
    "ops",
    "relative_error",
]

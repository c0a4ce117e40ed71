"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from mtcp_errors import ShapeError, StateError
from mtcp_tensor import Tensor


@dataclass
class OptimizerState:
    """Per-parameter first/second moments plus the shared step counter."""

    first_moments: List[np.ndarray] = field(default_factory=list)
    second_moments: List[np.ndarray] = field(default_factory=list)
    step: int = 0
    lr: float = 5e-5
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], lr: float = 5e-5, weight_decay: float = 1e-4) -> OptimizerState:
        return cls(
            first_moments=[np.zeros_like(p.data) for p in params],
            second_moments=[np.zeros_like(p.data) for p in params],
            lr=lr,
            weight_decay=weight_decay,
        )


def adamw_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: OptimizerState,
    lr: Optional[float] = None,
    wd: Optional[float] = None,
) -> None:
    """Update ``params`` in place.

    Weight decay shrinks each parameter by (1 - lr*wd) before the
    bias-corrected moment step.
    """
    if len(params) != len(state.first_moments) or len(grads) != len(params):
        raise StateError(
            f"optimizer state tracks {len(state.first_moments)} parameters, got {len(params)} params "
            f"and {len(grads)} grads"
        )
    lr = state.lr if lr is None else lr
    wd = state.weight_decay if wd is None else wd
    state.step += 1
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step
    for param, grad, m, v in zip(params, grads, state.first_moments, state.second_moments):
        if grad.shape != param.data.shape or m.shape != param.data.shape:
            raise ShapeError(f"adamw_step shape mismatch: param {param.data.shape}, grad {grad.shape}")
        if wd:
            param.data *= 1.0 - lr * wd
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        param.data -= lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)

"""Adam parameter updates with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import ShapeMismatch
from .tensor import Tensor


@dataclass
class AdamState:
    """Moment buffers and step counter for a fixed parameter list."""

    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    t: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor], lr: float = 2e-4, beta1: float = 0.5,
                   beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        if not 0.0 < beta1 < 1.0 or not 0.0 < beta2 < 1.0:
            raise ValueError(f"betas must lie in (0,1), got ({beta1}, {beta2})")
        return cls(
            lr=lr, beta1=beta1, beta2=beta2, eps=eps,
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
        )


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None],
              state: AdamState) -> Sequence[Tensor]:
    """One in-place Adam update; a None gradient is treated as zero."""
    if len(params) != len(state.m):
        raise ShapeMismatch(
            f"optimizer tracks {len(state.m)} parameters, got {len(params)}"
        )
    if len(grads) != len(params):
        raise ShapeMismatch(f"{len(params)} parameters but {len(grads)} gradients")
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeMismatch(
                f"gradient shape {g.shape} does not match parameter {p.data.shape}"
            )
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params

"""AdamW with decoupled weight decay."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Parameter


@dataclass
class AdamWState:
    lr: float = 8e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(state: AdamWState, params: list[Parameter]) -> None:
    """Apply one AdamW update in place, then zero the gradients."""
    state.step += 1
    beta1, beta2 = state.betas
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    step_size = state.lr * math.sqrt(bc2) / bc1
    for p in params:
        g = p.grad
        m = state.exp_avg.get(p.name)
        if m is None:
            m = state.exp_avg[p.name] = np.zeros_like(p.data)
            state.exp_avg_sq[p.name] = np.zeros_like(p.data)
        v = state.exp_avg_sq[p.name]
        if state.weight_decay != 0.0:
            p.data *= 1.0 - state.lr * state.weight_decay
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= step_size * m / (np.sqrt(v) + state.eps * math.sqrt(bc2))
        p.grad = np.zeros_like(p.data)

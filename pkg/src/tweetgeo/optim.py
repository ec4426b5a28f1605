from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


@dataclass
class AdamWState:
    step: int = 0
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)


class AdamW:
    """Adam with decoupled weight decay, updating numpy arrays in place."""

    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-2):
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = AdamWState()

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        adamw_step(params, grads, self.state, self.lr, self.betas, self.eps, self.weight_decay)


def adamw_step(params, grads, state: AdamWState, lr, betas=(0.9, 0.999), eps=1e-8,
               weight_decay=0.0):
    """One AdamW update of every array in ``grads``; returns ``(params, state)``."""
    beta1, beta2 = betas
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise ContractError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        m = state.exp_avg.get(name)
        if m is None:
            m = state.exp_avg[name] = np.zeros_like(p)
            state.exp_avg_sq[name] = np.zeros_like(p)
        v = state.exp_avg_sq[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if weight_decay:
            p -= lr * weight_decay * p
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, state

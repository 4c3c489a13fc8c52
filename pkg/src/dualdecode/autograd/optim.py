"""AdamW with decoupled weight decay, plus a warmup + cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adamw_step(params, grads, state: AdamState, lr: float, weight_decay: float = 0.0,
               betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
               decay_mask=None):
    """One AdamW update. Returns ``(new_params, new_state)``; inputs are not mutated."""
    b1, b2 = betas
    if not state.m:
        m_prev = [np.zeros_like(p) for p in params]
        v_prev = [np.zeros_like(p) for p in params]
    else:
        m_prev, v_prev = state.m, state.v
    t = state.step + 1
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_p, new_m, new_v = [], [], []
    for i, (p, g) in enumerate(zip(params, grads)):
        m = b1 * m_prev[i] + (1.0 - b1) * g
        v = b2 * v_prev[i] + (1.0 - b2) * g * g
        wd = weight_decay if decay_mask is None or decay_mask[i] else 0.0
        q = p - lr * wd * p
        q = q - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_p.append(q)
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(step=t, m=new_m, v=new_v)


class AdamW:
    """Stateful wrapper over :func:`adamw_step` that updates tensors in place."""

    def __init__(self, params: list[Tensor], lr: float = 7.5e-4, weight_decay: float = 0.05,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 no_decay: set[int] | None = None):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        no_decay = no_decay or set()
        self.decay_mask = [id(p) not in no_decay for p in self.params]
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        new, self.state = adamw_step([p.data for p in self.params], grads, self.state,
                                     self.lr if lr is None else lr, self.weight_decay,
                                     self.betas, self.eps, self.decay_mask)
        for p, d in zip(self.params, new):
            p.data = d


def cosine_lr(step: int, total_steps: int, base_lr: float, warmup_steps: int = 0,
              final_lr: float = 0.0) -> float:
    """Linear warmup to ``base_lr`` followed by cosine decay to ``final_lr``."""
    if total_steps <= 0:
        return base_lr
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min(max(step - warmup_steps, 0) / span, 1.0)
    return final_lr + 0.5 * (base_lr - final_lr) * (1.0 + math.cos(math.pi * progress))

"""Adam with bias correction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state, params, grads=None, lr=1e-4, beta1=BETA1, beta2=BETA2, eps=ADAM_EPS):
    """One in-place Adam update; ``grads`` defaults to each parameter's ``.grad``."""
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    grads = [p.grad for p in params] if grads is None else grads
    state.t += 1
    c1 = 1 - beta1 ** state.t
    c2 = 1 - beta2 ** state.t
    for p, g in zip(params, grads):
        m = state.m.setdefault(p.id, np.zeros_like(p.value))
        v = state.v.setdefault(p.id, np.zeros_like(p.value))
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


class Adam:
    def __init__(self, params, lr=1e-4):
        self.params = list(params)
        self.lr = lr
        self.state = AdamState()

    def step(self):
        adam_step(self.state, self.params, lr=self.lr)

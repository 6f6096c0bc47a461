"""AdamW, global-norm clipping and an exponential moving average of weights."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..numerics import Tensor


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adamw_step(p: Tensor, grad: np.ndarray, state: AdamState, lr: float, betas=(0.9, 0.999),
               eps: float = 1e-8, weight_decay: float = 0.01) -> None:
    """One in-place AdamW update with decoupled weight decay."""
    b1, b2 = betas
    state.t += 1
    state.m = b1 * state.m + (1.0 - b1) * grad
    state.v = b2 * state.v + (1.0 - b2) * grad * grad
    m_hat = state.m / (1.0 - b1 ** state.t)
    v_hat = state.v / (1.0 - b2 ** state.t)
    p.data = p.data * (1.0 - lr * weight_decay) - lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class AdamW:
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    states: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict, lrs: dict) -> None:
        for name in sorted(params):
            p = params[name]
            st = self.states.get(name)
            if st is None or st.m.shape != p.shape:
                st = self.states[name] = AdamState(np.zeros_like(p.data), np.zeros_like(p.data))
            adamw_step(p, grads[name], st, lrs[name], self.betas, self.eps, self.weight_decay)


def clip_global_norm(grads: dict, max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``; returns the raw norm."""
    total = float(np.sqrt(sum(float((g * g).sum()) for _, g in sorted(grads.items()))))
    if max_norm > 0 and total > max_norm:
        s = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * s
    return total


@dataclass
class EmaState:
    decay: float
    shadow: dict = field(default_factory=dict)

    @classmethod
    def init(cls, params: dict, decay: float) -> "EmaState":
        return cls(decay, {k: p.data.copy() for k, p in params.items()})

    def update(self, params: dict) -> None:
        b = self.decay
        for k, p in params.items():
            s = self.shadow.get(k)
            self.shadow[k] = p.data.copy() if s is None else b * s + (1.0 - b) * p.data

    def swap(self, params: dict) -> None:
        """Exchange live and shadow values; calling twice restores the live weights."""
        for k, p in params.items():
            if k in self.shadow:
                p.data, self.shadow[k] = self.shadow[k], p.data


def ema_update(state: EmaState, params: dict) -> None:
    state.update(params)


def ema_swap(state: EmaState, params: dict) -> None:
    state.swap(params)

"""Small parameter containers shared by the model components."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import Tensor, ops


@dataclass
class Affine:
    w: Tensor
    b: Tensor

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator, scale: float = 1.0) -> "Affine":
        w = rng.standard_normal((n_in, n_out)) * (scale / math.sqrt(max(n_in, 1)))
        return cls(Tensor(w, requires_grad=True), Tensor(np.zeros(n_out), requires_grad=True))

    @classmethod
    def zeros(cls, n_in: int, n_out: int) -> "Affine":
        return cls(Tensor(np.zeros((n_in, n_out)), requires_grad=True),
                   Tensor(np.zeros(n_out), requires_grad=True))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.w, self.b)

    def named(self, prefix: str):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


def param(arr) -> Tensor:
    return Tensor(np.array(arr, dtype=np.float64), requires_grad=True)


def sinusoid_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d // 2)[None, :]
    ang = pos / (10000.0 ** (2 * i / d))
    out = np.zeros((n, d))
    out[:, 0:2 * (d // 2):2] = np.sin(ang)
    out[:, 1:2 * (d // 2):2] = np.cos(ang)
    return out


def time_embedding(t: np.ndarray, n_freq: int = 8) -> np.ndarray:
    """``[sin(pi 2^k t), cos(pi 2^k t)]`` for k < n_freq; shape ``t.shape + (2 n_freq,)``."""
    t = np.asarray(t, dtype=np.float64)[..., None]
    f = np.pi * 2.0 ** np.arange(n_freq)
    return np.concatenate([np.sin(f * t), np.cos(f * t)], axis=-1)

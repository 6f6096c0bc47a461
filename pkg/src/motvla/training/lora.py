"""Low-rank adapters composed onto frozen projection matrices."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..mot import PROJECTIONS, ExpertParams, MoTStack
from ..numerics import RankError, Tensor, ops


@dataclass
class LoraAdapter:
    a: Tensor       # (d_in, r)
    b: Tensor       # (r, d_out)
    alpha: float

    def __post_init__(self):
        if self.a.shape[1] != self.b.shape[0]:
            raise RankError(f"adapter factors disagree on rank: {self.a.shape} x {self.b.shape}")

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @classmethod
    def init(cls, d_in: int, d_out: int, r: int, alpha: float, rng: np.random.Generator) -> "LoraAdapter":
        if r < 1 or r > min(d_in, d_out):
            raise RankError(f"rank {r} invalid for a {d_in}x{d_out} matrix")
        a = rng.standard_normal((d_in, r)) / math.sqrt(d_in)
        return cls(Tensor(a, requires_grad=True), Tensor(np.zeros((r, d_out)), requires_grad=True), float(alpha))

    def apply(self, w: Tensor) -> Tensor:
        """``W + (alpha / r) A B`` composed on the fly."""
        if w.shape != (self.a.shape[0], self.b.shape[1]):
            raise RankError(f"adapter {self.a.shape[0]}x{self.b.shape[1]} does not fit weight {w.shape}")
        return ops.add(w, ops.scale(ops.matmul(self.a, self.b), self.scale))

    def delta(self) -> np.ndarray:
        return self.scale * (self.a.data @ self.b.data)


def lora_apply(adapter: LoraAdapter, w: Tensor) -> Tensor:
    return adapter.apply(w)


def lora_merge(expert: ExpertParams, name: str) -> None:
    """Fold the adapter on ``name`` into the base weight and drop it."""
    adapter = expert.lora.pop(name)
    base = getattr(expert, name)
    base.data = base.data + adapter.delta()


def attach_lora(stack: MoTStack, r: int = 8, alpha: float = 16.0, rng: np.random.Generator | None = None,
                group: str = "und", names=PROJECTIONS) -> list[str]:
    """Add adapters to ``group``'s projection matrices in every layer; returns adapted names."""
    rng = rng if rng is not None else np.random.default_rng(0)
    added = []
    for i, layer in enumerate(stack.layers):
        e = layer.experts[group]
        for n in names:
            if n in e.lora:
                continue
            w = getattr(e, n)
            e.lora[n] = LoraAdapter.init(w.shape[0], w.shape[1], r, alpha, rng)
            added.append(f"layer{i}.{n}")
    return added


def merge_all(stack: MoTStack) -> None:
    seen = set()
    for layer in stack.layers:
        for e in layer.experts.values():
            if id(e) in seen:
                continue
            seen.add(id(e))
            for n in list(e.lora):
                lora_merge(e, n)

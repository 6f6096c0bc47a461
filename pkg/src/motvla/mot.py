"""Mixture-of-Transformers layers with masked joint attention.

Tokens travel as three groups (understanding, perception, action).  Each
group owns its projection, normalisation and feed-forward weights; attention
runs once over the concatenated sequence with a block visibility mask:

* understanding rows see understanding columns causally and nothing else,
* perception rows see all understanding and all perception columns,
* action rows see everything.

Normalisation sits on the residual branch: ``H = T + LN(Z Wo)`` and
``O = H + LN(FFN(H))``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import DimensionError, Tensor, ops

EXPERTS = ("und", "per", "act")


class EmptyLayoutError(ValueError):
    pass


@dataclass(frozen=True)
class VisibilityMask:
    layout: tuple[int, int, int]
    allowed: np.ndarray

    @property
    def size(self) -> int:
        return int(sum(self.layout))

    @property
    def additive(self) -> np.ndarray:
        return np.where(self.allowed, 0.0, -np.inf)

    def group_slices(self) -> dict[str, slice]:
        nu, np_, na = self.layout
        return {"und": slice(0, nu), "per": slice(nu, nu + np_), "act": slice(nu + np_, nu + np_ + na)}


def build_mask(layout) -> VisibilityMask:
    nu, np_, na = (int(n) for n in layout)
    if min(nu, np_, na) < 0:
        raise ValueError(f"negative group size in layout {layout}")
    n = nu + np_ + na
    if n == 0:
        raise EmptyLayoutError("layout has no tokens")
    allowed = np.zeros((n, n), dtype=bool)
    allowed[:nu, :nu] = np.tril(np.ones((nu, nu), dtype=bool))
    allowed[nu:nu + np_, :nu + np_] = True
    allowed[nu + np_:, :] = True
    allowed.setflags(write=False)
    return VisibilityMask((nu, np_, na), allowed)


PROJECTIONS = ("wq", "wk", "wv", "wo")


@dataclass
class ExpertParams:
    """One expert's weights inside a layer."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ln_attn_g: Tensor
    ln_attn_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln_ffn_g: Tensor
    ln_ffn_b: Tensor
    lora: dict = field(default_factory=dict)

    TENSORS = ("wq", "wk", "wv", "wo", "ln_attn_g", "ln_attn_b", "w1", "b1", "w2", "b2",
               "ln_ffn_g", "ln_ffn_b")

    @property
    def width(self) -> int:
        return self.wq.shape[0]

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, ffn_mult: int = 4) -> "ExpertParams":
        def w(i, o):
            return Tensor(rng.standard_normal((i, o)) / math.sqrt(i), requires_grad=True)

        h = ffn_mult * d
        return cls(w(d, d), w(d, d), w(d, d), w(d, d),
                   Tensor(np.ones(d), requires_grad=True), Tensor(np.zeros(d), requires_grad=True),
                   w(d, h), Tensor(np.zeros(h), requires_grad=True),
                   w(h, d), Tensor(np.zeros(d), requires_grad=True),
                   Tensor(np.ones(d), requires_grad=True), Tensor(np.zeros(d), requires_grad=True))

    def weight(self, name: str) -> Tensor:
        """Projection weight with any LoRA adapter composed on the fly."""
        base = getattr(self, name)
        adapter = self.lora.get(name)
        return base if adapter is None else adapter.apply(base)

    def named_tensors(self):
        for n in self.TENSORS:
            yield n, getattr(self, n)
        for n, adapter in sorted(self.lora.items()):
            yield f"{n}.lora_a", adapter.a
            yield f"{n}.lora_b", adapter.b

    def copy_from(self, other: "ExpertParams") -> None:
        for n in self.TENSORS:
            getattr(self, n).data = getattr(other, n).data.copy()


@dataclass
class MoTLayerParams:
    experts: dict[str, ExpertParams]
    heads: int

    def __post_init__(self):
        widths = {e.width for e in self.experts.values()}
        if len(widths) != 1:
            raise DimensionError(f"experts disagree on width: {widths}")
        d = widths.pop()
        if d % self.heads:
            raise DimensionError(f"width {d} not divisible by {self.heads} heads")

    @property
    def width(self) -> int:
        return next(iter(self.experts.values())).width

    @property
    def tied(self) -> bool:
        e = self.experts
        return e["und"] is e["per"] is e["act"]

    @classmethod
    def init(cls, d: int, heads: int, rng: np.random.Generator, shared: bool = False):
        if shared:
            e = ExpertParams.init(d, rng)
            return cls({g: e for g in EXPERTS}, heads)
        return cls({g: ExpertParams.init(d, rng) for g in EXPERTS}, heads)


# --- the three steps of a layer ---------------------------------------------

def expert_project(groups: dict[str, Tensor], params: MoTLayerParams) -> dict[str, tuple]:
    """Per-group ``(Q, K, V)`` from that group's own projection weights."""
    d = params.width
    out = {}
    for g in EXPERTS:
        x = groups[g]
        if x.shape[-1] != d:
            raise DimensionError(f"{g} tokens have width {x.shape[-1]}, expected {d}")
        e = params.experts[g]
        if x.shape[-2] == 0:
            empty = Tensor(np.zeros(x.shape))
            out[g] = (empty, empty, empty)
            continue
        out[g] = (ops.matmul(x, e.weight("wq")), ops.matmul(x, e.weight("wk")),
                  ops.matmul(x, e.weight("wv")))
    return out


def _split_heads(x: Tensor, h: int) -> Tensor:
    B, N, d = x.shape
    return ops.transpose(ops.reshape(x, (B, N, h, d // h)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, h, N, dk = x.shape
    return ops.reshape(ops.transpose(x, (0, 2, 1, 3)), (B, N, h * dk))


def attention(q: Tensor, k: Tensor, v: Tensor, allowed: np.ndarray | None, heads: int) -> Tensor:
    """Multi-head scaled dot-product attention; ``allowed`` is masked per head."""
    d = q.shape[-1]
    if d % heads:
        raise DimensionError(f"width {d} not divisible by {heads} heads")
    qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
    scores = ops.scale(ops.matmul(qh, ops.swap_last(kh)), 1.0 / math.sqrt(d // heads))
    return _merge_heads(ops.matmul(ops.softmax(scores, allowed), vh))


def masked_joint_attention(qkv: dict[str, tuple], mask: VisibilityMask, heads: int) -> dict[str, Tensor]:
    """Concatenate (und, per, act), attend under ``mask`` and split back."""
    q = ops.concat([qkv[g][0] for g in EXPERTS], axis=1)
    k = ops.concat([qkv[g][1] for g in EXPERTS], axis=1)
    v = ops.concat([qkv[g][2] for g in EXPERTS], axis=1)
    if q.shape[1] != mask.size:
        raise DimensionError(f"sequence length {q.shape[1]} does not match mask layout {mask.layout}")
    z = attention(q, k, v, mask.allowed, heads)
    return {g: ops.index(z, (slice(None), s)) for g, s in mask.group_slices().items()}


def _ffn(e: ExpertParams, x: Tensor) -> Tensor:
    return ops.linear(ops.gelu(ops.linear(x, e.w1, e.b1)), e.w2, e.b2)


def mot_layer_forward(groups: dict[str, Tensor], params: MoTLayerParams,
                      mask: VisibilityMask) -> dict[str, Tensor]:
    qkv = expert_project(groups, params)
    z = masked_joint_attention(qkv, mask, params.heads)
    out = {}
    for g in EXPERTS:
        t = groups[g]
        if t.shape[-2] == 0:
            out[g] = t
            continue
        e = params.experts[g]
        h = ops.add(t, ops.layer_norm(ops.matmul(z[g], e.weight("wo")), e.ln_attn_g, e.ln_attn_b))
        out[g] = ops.add(h, ops.layer_norm(_ffn(e, h), e.ln_ffn_g, e.ln_ffn_b))
    return out


def monolithic_reference_forward(x: Tensor, e: ExpertParams, allowed: np.ndarray, heads: int) -> Tensor:
    """Plain transformer layer (one weight set for every token) under ``allowed``."""
    B, N, d = x.shape
    dk = d // heads
    q = ops.matmul(x, e.weight("wq"))
    k = ops.matmul(x, e.weight("wk"))
    v = ops.matmul(x, e.weight("wv"))
    per_head = []
    for i in range(heads):
        cols = slice(i * dk, (i + 1) * dk)
        qi = ops.index(q, (slice(None), slice(None), cols))
        ki = ops.index(k, (slice(None), slice(None), cols))
        vi = ops.index(v, (slice(None), slice(None), cols))
        att = ops.softmax(ops.scale(ops.matmul(qi, ops.swap_last(ki)), 1.0 / math.sqrt(dk)), allowed)
        per_head.append(ops.matmul(att, vi))
    z = ops.concat(per_head, axis=2)
    h = ops.add(x, ops.layer_norm(ops.matmul(z, e.weight("wo")), e.ln_attn_g, e.ln_attn_b))
    f = ops.linear(ops.gelu(ops.linear(h, e.w1, e.b1)), e.w2, e.b2)
    return ops.add(h, ops.layer_norm(f, e.ln_ffn_g, e.ln_ffn_b))


# --- stack -----------------------------------------------------------------

@dataclass
class MoTStack:
    layers: list[MoTLayerParams]
    final_ln: dict[str, tuple[Tensor, Tensor]]
    lm_head_w: Tensor
    lm_head_b: Tensor
    shared: bool = False

    @classmethod
    def init(cls, d: int, heads: int, n_layers: int, vocab_size: int, rng: np.random.Generator,
             shared: bool = False) -> "MoTStack":
        if n_layers < 1:
            raise ValueError("need at least one layer")
        layers = [MoTLayerParams.init(d, heads, rng, shared) for _ in range(n_layers)]
        if shared:
            ln = (Tensor(np.ones(d), requires_grad=True), Tensor(np.zeros(d), requires_grad=True))
            final = {g: ln for g in EXPERTS}
        else:
            final = {g: (Tensor(np.ones(d), requires_grad=True), Tensor(np.zeros(d), requires_grad=True))
                     for g in EXPERTS}
        head_w = Tensor(rng.standard_normal((d, vocab_size)) / math.sqrt(d), requires_grad=True)
        return cls(layers, final, head_w, Tensor(np.zeros(vocab_size), requires_grad=True), shared)

    @property
    def width(self) -> int:
        return self.layers[0].width

    def final_norm(self, g: str, x: Tensor) -> Tensor:
        gain, bias = self.final_ln[g]
        return ops.layer_norm(x, gain, bias)

    def named_parameters(self, prefix: str = "mot"):
        seen: set[int] = set()
        for i, layer in enumerate(self.layers):
            for g in EXPERTS:
                e = layer.experts[g]
                tag = "shared" if self.shared else g
                for n, t in e.named_tensors():
                    if id(t) not in seen:
                        seen.add(id(t))
                        yield f"{prefix}.layer{i}.{tag}.{n}", t
        for g in EXPERTS:
            tag = "shared" if self.shared else g
            for n, t in zip(("gain", "bias"), self.final_ln[g]):
                if id(t) not in seen:
                    seen.add(id(t))
                    yield f"{prefix}.final_ln.{tag}.{n}", t
        yield f"{prefix}.lm_head.w", self.lm_head_w
        yield f"{prefix}.lm_head.b", self.lm_head_b


def stack_forward(groups: dict[str, Tensor], stack: MoTStack, mask: VisibilityMask,
                  probe: bool = False):
    """Run all layers; returns ``(groups, snapshots)``.

    ``snapshots[g]`` lists each layer's output for group ``g`` when ``probe``
    is on (raw arrays, detached from the tape).
    """
    snaps: dict[str, list[np.ndarray]] | None = {g: [] for g in EXPERTS} if probe else None
    for layer in stack.layers:
        if stack.shared:
            x = ops.concat([groups[g] for g in EXPERTS], axis=1)
            y = monolithic_reference_forward(x, layer.experts["und"], mask.allowed, layer.heads)
            groups = {g: ops.index(y, (slice(None), s)) for g, s in mask.group_slices().items()}
        else:
            groups = mot_layer_forward(groups, layer, mask)
        if probe:
            for g in EXPERTS:
                snaps[g].append(groups[g].data.copy())
    return groups, snaps

"""The full driving model: encoders, perception queries, MoT stack and heads."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .action_flow import flow_loss, velocity_head
from .mot import MoTStack, build_mask, stack_forward
from .nn import Affine
from .numerics import Tensor, ops
from .perception import (
    FeaturePyramid, PerceptionConfig, PerceptionOutputs, PerceptionParams, PerceptionTargets,
    first_pass, lift_to_expert, perception_loss, project_back_and_refine,
)
from .scene_encoding import (
    K_VIS, ActionLift, EGO_IN, TokenGroupBatch, UnderstandingEncoder, caption_token_ids, ego_nav_input,
    flow_interpolate, general_token_ids, normalised_velocities, pooled_visual_features,
)
from .vocab import Vocabulary
from .worldgen import HORIZON, N_CHANNELS, general_sentence

LOSS_TERMS = ("ar", "per", "act", "motion")


class EmptyObjectiveError(ValueError):
    pass


@dataclass
class ModelConfig:
    d: int = 32
    heads: int = 2
    layers: int = 2
    text_len: int = 11
    horizon: int = HORIZON
    shared: bool = False
    perception: PerceptionConfig = field(default_factory=PerceptionConfig)

    @property
    def n_u(self) -> int:
        return K_VIS + self.text_len + 1

    @property
    def n_p(self) -> int:
        return self.perception.n_tokens

    @property
    def n_a(self) -> int:
        return self.horizon


@dataclass
class Batch:
    """Collated inputs and targets for a list of scenes (or caption-only examples)."""

    vis: np.ndarray
    text_ids: np.ndarray
    ego_in: np.ndarray
    pyramid: FeaturePyramid | None = None
    targets: PerceptionTargets | None = None
    x0: np.ndarray | None = None
    x1: np.ndarray | None = None
    t: np.ndarray | None = None
    scenes: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.text_ids.shape[0]

    @property
    def x_t(self) -> np.ndarray:
        return flow_interpolate(self.x1, self.t, self.x0).x_t

    @property
    def u(self) -> np.ndarray:
        return self.x1 - self.x0


def scene_batch(scenes, vocab: Vocabulary, cfg: ModelConfig, rng: np.random.Generator | None = None,
                t=None, x0=None) -> Batch:
    """Full-sequence batch: driving captions, perception inputs and a flow draw per scene."""
    B = len(scenes)
    vis = np.stack([pooled_visual_features(s.feature_maps[1]) for s in scenes])
    ids = np.stack([caption_token_ids(vocab, s.nav, s.caption, cfg.text_len) for s in scenes])
    ego = np.stack([ego_nav_input(s.ego_history, s.nav) for s in scenes])
    x1 = np.stack([normalised_velocities(s) for s in scenes])
    rng = rng if rng is not None else np.random.default_rng(0)
    if x0 is None:
        x0 = rng.standard_normal(x1.shape)
    if t is None:
        t = rng.uniform(0.0, 1.0, size=B)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,)).copy()
    return Batch(vis, ids, ego, FeaturePyramid.from_scenes(scenes),
                 PerceptionTargets.from_scenes(scenes, cfg.perception.occ_grid), x0, x1, t, list(scenes))


def caption_batch(items, vocab: Vocabulary, cfg: ModelConfig) -> Batch:
    """Caption-only batch.  ``items`` holds scenes (driving captions) or plain sentences."""
    vis, ids, ego = [], [], []
    for it in items:
        if isinstance(it, str):
            vis.append(np.zeros((K_VIS, N_CHANNELS)))
            ids.append(general_token_ids(vocab, it, cfg.text_len))
            ego.append(np.zeros(EGO_IN))
        else:
            vis.append(pooled_visual_features(it.feature_maps[1]))
            ids.append(caption_token_ids(vocab, it.nav, it.caption, cfg.text_len))
            ego.append(ego_nav_input(it.ego_history, it.nav))
    return Batch(np.stack(vis), np.stack(ids), np.stack(ego))


def general_sentences(n: int, seed: int) -> list[str]:
    rng = np.random.default_rng(seed)
    return [general_sentence(rng) for _ in range(n)]


@dataclass
class ForwardResult:
    logits: Tensor
    token_ids: np.ndarray
    v_hat: Tensor | None = None
    perception: PerceptionOutputs | None = None
    first_pass: PerceptionOutputs | None = None
    outputs: dict | None = None
    snapshots: dict | None = None


@dataclass
class LossBreakdown:
    total: Tensor
    terms: dict          # name -> float (unweighted)
    perception_terms: dict = field(default_factory=dict)


class DrivingModel:
    """Understanding / perception / action experts sharing one masked transformer."""

    def __init__(self, cfg: ModelConfig, vocab: Vocabulary, seed: int = 0, anchors: dict | None = None):
        self.cfg = cfg
        self.vocab = vocab
        self.stage_done = 0
        rng = np.random.default_rng(seed)
        self.encoder = UnderstandingEncoder.init(len(vocab), cfg.d, rng)
        self.perception = PerceptionParams.init(cfg.perception, cfg.d, rng, anchors)
        self.stack = MoTStack.init(cfg.d, cfg.heads, cfg.layers, len(vocab), rng, shared=cfg.shared)
        self.action = ActionLift.init(cfg.horizon, cfg.d, rng)
        self.vel_head = Affine.init(cfg.d, 2, rng, scale=0.5)

    # --- parameters ---------------------------------------------------------

    def named_parameters(self):
        yield from self.encoder.named_parameters("enc")
        yield from self.perception.named_parameters("perc")
        yield from self.stack.named_parameters("mot")
        yield from self.action.named_parameters("act")
        yield from self.vel_head.named("act.vel_head")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        if strict and missing:
            raise KeyError(f"checkpoint lacks {sorted(missing)[:5]}")
        for k, p in params.items():
            if k in state:
                if state[k].shape != p.shape:
                    raise ValueError(f"{k}: checkpoint shape {state[k].shape} != {p.shape}")
                p.data = np.array(state[k], dtype=np.float64)

    # --- forward ------------------------------------------------------------

    def forward(self, batch: Batch, with_per: bool = True, with_act: bool = True, probe: bool = False,
                x_t: np.ndarray | None = None, t: np.ndarray | None = None) -> ForwardResult:
        cfg = self.cfg
        und, ids = self.encoder(batch.vis, batch.text_ids, batch.ego_in)
        per = fp = None
        if with_per:
            fp = first_pass(self.perception, batch.pyramid)
            per = lift_to_expert(fp, self.perception)
        act = None
        if with_act:
            x_t = batch.x_t if x_t is None else x_t
            t = batch.t if t is None else t
            act = self.action(x_t, t)
        tokens = TokenGroupBatch(und, ids, per, act, None if act is None else np.asarray(t))
        mask = build_mask(tokens.group_layout)
        out, snaps = stack_forward(tokens.groups(), self.stack, mask, probe=probe)
        h_und = self.stack.final_norm("und", out["und"])
        logits = ops.linear(h_und, self.stack.lm_head_w, self.stack.lm_head_b)
        res = ForwardResult(logits, ids, outputs=out, snapshots=snaps)
        if with_act:
            res.v_hat = velocity_head(self.stack.final_norm("act", out["act"]), self.vel_head, cfg.horizon)
        if with_per:
            o_per = self.stack.final_norm("per", out["per"])
            res.perception = project_back_and_refine(o_per, fp, self.perception, batch.pyramid)
            res.first_pass = fp.outputs
        return res

    def velocity_field(self, batch: Batch):
        """Closure ``(x, t) -> v_hat`` rerunning the full forward for the Euler sampler."""
        def field_fn(x, t):
            tt = np.full(batch.size, float(t))
            return self.forward(batch, x_t=x, t=tt).v_hat.data
        return field_fn


# --- objectives ---------------------------------------------------------------

def caption_nll(logits: Tensor, token_ids: np.ndarray, pad: int) -> Tensor:
    """Mean next-token NLL over non-PAD text targets (positions after BOS)."""
    src_pos, tgt = [], []
    B, N = token_ids.shape
    for b in range(B):
        for j in range(N - 1):
            nxt = token_ids[b, j + 1]
            if token_ids[b, j] >= 0 and nxt >= 0 and nxt != pad:
                src_pos.append((b, j))
                tgt.append(nxt)
    if not tgt:
        return Tensor(np.array(0.0))
    bi, ji = (np.array(v, dtype=np.int64) for v in zip(*src_pos))
    picked = ops.index(logits, (bi, ji))
    return ops.mean(ops.nll_from_logits(picked, np.array(tgt, dtype=np.int64)))


def total_loss(terms: dict, lambdas: dict | None = None, enabled=None) -> Tensor:
    """Weighted sum of enabled loss terms; disabled terms contribute nothing."""
    lambdas = lambdas or {}
    enabled = set(terms if enabled is None else enabled)
    used = [k for k in LOSS_TERMS if k in enabled and k in terms and terms[k] is not None]
    if not used:
        raise EmptyObjectiveError("no loss term enabled")
    out = None
    for k in used:
        w = float(lambdas.get(k, 1.0))
        if w == 0.0:
            continue
        v = terms[k] if isinstance(terms[k], Tensor) else Tensor(np.asarray(terms[k], dtype=np.float64))
        v = ops.scale(v, w)
        out = v if out is None else ops.add(out, v)
    return out if out is not None else Tensor(np.array(0.0))


def compute_losses(model: DrivingModel, batch: Batch, enabled=("ar", "per", "act"), lambdas: dict | None = None,
                   per_weights: dict | None = None) -> LossBreakdown:
    """Forward ``batch`` and assemble the weighted objective over ``enabled`` terms."""
    enabled = tuple(enabled)
    need_per = any(k in enabled for k in ("per", "motion"))
    need_act = "act" in enabled
    res = model.forward(batch, with_per=need_per, with_act=need_act)
    terms: dict = {}
    if "ar" in enabled:
        terms["ar"] = caption_nll(res.logits, res.token_ids, model.vocab.pad)
    per_terms = {}
    if need_per:
        tasks = [t for t in model.cfg.perception.tasks if t != "motion"] if "per" in enabled else []
        if "motion" in enabled and "motion" in model.cfg.perception.tasks:
            tasks.append("motion")
        pl = perception_loss(res.perception, batch.targets, per_weights, tasks=tasks)
        per_terms = pl.terms
        if "per" in enabled:
            terms["per"] = _sum([v for k, v in pl.parts.items() if k != "motion"])
        if "motion" in pl.parts:
            terms["motion"] = pl.parts["motion"]
    if need_act:
        terms["act"] = flow_loss(res.v_hat, batch.u)
    lam = {"ar": 1.0, "per": 1.0, "act": 1.0, "motion": 1.0, **(lambdas or {})}
    total = total_loss(terms, lam, enabled)
    return LossBreakdown(total, {k: float(v.data) for k, v in terms.items()}, per_terms)


def _sum(parts):
    out = Tensor(np.array(0.0))
    for p in parts:
        out = ops.add(out, p)
    return out

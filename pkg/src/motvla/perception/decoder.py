"""Sparse query decoder with deformable sampling and an occupancy latent.

Queries for detection, map and ego are concatenated into one ``(B, Q, d_q)``
tensor (in that order).  Motion forecasts ride on the detection queries.
A decoder block runs, in order: temporal cross-attention (only when a
previous frame is carried), intra-task self-attention, inter-task
self-attention, deformable aggregation and task-wise refinement.  Every
output is stored as a running value that each block refines by adding a
predicted delta, so zero-weight heads leave the anchors untouched.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .. import geometry as geo
from ..mot import attention
from ..nn import Affine, param
from ..numerics import DimensionError, Tensor, ops
from ..worldgen import HORIZON, N_CHANNELS, POLY_POINTS, VIEW_WINDOWS, view_geometry

QUERY_TASKS = ("det", "map", "ego")
ALL_TASKS = ("det", "map", "ego", "motion", "occ")
N_AGENT_CLASSES = 3
N_MAP_CLASSES = 3
BOX_DIM = 5            # cx, cy, log w, log l, yaw
EGO_DIM = 2            # speed / SPEED_SCALE, yaw rate
OCC_POOL = 4           # the latent grid is pooled into OCC_POOL x OCC_POOL lift tokens


class TaskDisabledError(KeyError):
    pass


class AlignmentError(ValueError):
    pass


@dataclass
class PerceptionConfig:
    d_q: int = 32
    n_det: int = 16
    n_map: int = 8
    modes: int = 3
    horizon: int = HORIZON
    points: int = POLY_POINTS
    samples: int = 4
    occ_grid: int = geo.GRID
    d_o: int = 16
    blocks_before: int = 2
    blocks_after: int = 1
    offset_scale: float = 2.0
    extent: float = geo.BEV_RANGE
    tasks: tuple = ALL_TASKS

    def __post_init__(self):
        self.tasks = tuple(self.tasks)
        bad = set(self.tasks) - set(ALL_TASKS)
        if bad:
            raise ValueError(f"unknown perception tasks {sorted(bad)}")
        if "motion" in self.tasks and "det" not in self.tasks:
            raise ValueError("motion forecasting rides on detection queries")
        if "occ" in self.tasks and self.occ_grid % OCC_POOL:
            raise ValueError(f"occupancy grid {self.occ_grid} not divisible by {OCC_POOL}")

    def count(self, task: str) -> int:
        if task not in self.tasks:
            return 0
        return {"det": self.n_det, "map": self.n_map, "ego": 1,
                "occ": OCC_POOL * OCC_POOL, "motion": 0}[task]

    @property
    def n_queries(self) -> int:
        return sum(self.count(t) for t in QUERY_TASKS)

    @property
    def n_tokens(self) -> int:
        """Perception tokens handed to the transformer: det, map, ego, occupancy."""
        return self.n_queries + self.count("occ")

    def query_slices(self) -> dict[str, slice]:
        out, at = {}, 0
        for t in QUERY_TASKS:
            n = self.count(t)
            if n:
                out[t] = slice(at, at + n)
                at += n
        return out

    def task_ids(self) -> np.ndarray:
        return np.concatenate([np.full(self.count(t), i) for i, t in enumerate(QUERY_TASKS)]).astype(np.int64)

    @property
    def n_levels(self) -> int:
        return 2

    @property
    def n_views(self) -> int:
        return len(VIEW_WINDOWS)

    @property
    def n_samples(self) -> int:
        return self.n_levels * self.n_views * self.samples


# --- containers --------------------------------------------------------------

@dataclass
class FeaturePyramid:
    """Batched multi-view maps; ``levels[l]`` is ``(B, V, H_l, W_l, C)``."""

    levels: list

    def __post_init__(self):
        self.levels = [np.asarray(x, dtype=np.float64) for x in self.levels]
        for a, b in zip(self.levels, self.levels[1:]):
            if b.shape[2] * 2 != a.shape[2] or b.shape[3] * 2 != a.shape[3]:
                raise DimensionError(f"pyramid levels {a.shape} -> {b.shape} do not halve")

    @classmethod
    def from_scenes(cls, scenes) -> "FeaturePyramid":
        return cls([np.stack([s.feature_maps[lvl] for s in scenes]) for lvl in range(2)])

    @property
    def batch(self) -> int:
        return self.levels[0].shape[0]

    def level_map(self, level: int) -> Tensor:
        """``(B, V, H, W, C)`` tensor of one level, built once and reused."""
        cache = self.__dict__.setdefault("_tensors", {})
        if level not in cache:
            cache[level] = Tensor(np.ascontiguousarray(self.levels[level]))
        return cache[level]


@dataclass
class SparseQueryBank:
    """Query features plus the running decoded state of every task."""

    features: Tensor
    cfg: PerceptionConfig
    det_box: Tensor | None = None
    det_logits: Tensor | None = None
    motion: Tensor | None = None
    mode_logits: Tensor | None = None
    map_pts: Tensor | None = None
    map_logits: Tensor | None = None
    ego_status: Tensor | None = None
    temporal_carry: Tensor | None = None

    def __post_init__(self):
        for t in QUERY_TASKS:
            if t in self.cfg.tasks and self.cfg.count(t) <= 0:
                raise ValueError(f"task {t} enabled with no queries")

    @property
    def batch(self) -> int:
        return self.features.shape[0]

    def task_features(self, task: str) -> Tensor:
        sl = self.cfg.query_slices()
        if task not in sl:
            raise TaskDisabledError(task)
        return ops.index(self.features, (slice(None), sl[task]))

    def reference_points(self) -> Tensor:
        """``(B, Q, 2)`` BEV centres of every query, clamped to the extent."""
        parts = []
        if self.det_box is not None:
            parts.append(ops.index(self.det_box, (Ellipsis, slice(0, 2))))
        if self.map_pts is not None:
            parts.append(ops.mean(self.map_pts, axis=2))
        if self.ego_status is not None:
            parts.append(Tensor(np.zeros((self.batch, 1, 2))))
        R = self.cfg.extent
        return ops.clip(ops.concat(parts, axis=1), -R, R)

    def replace(self, **kw) -> "SparseQueryBank":
        return dataclasses.replace(self, **kw)


@dataclass
class PerceptionOutputs:
    cfg: PerceptionConfig
    det_box: Tensor | None = None
    det_logits: Tensor | None = None
    motion: Tensor | None = None
    mode_logits: Tensor | None = None
    map_pts: Tensor | None = None
    map_logits: Tensor | None = None
    ego_status: Tensor | None = None
    occupancy: Tensor | None = None

    def require(self, task: str) -> None:
        if task not in self.cfg.tasks:
            raise TaskDisabledError(task)

    def boxes(self) -> np.ndarray:
        """Decoded ``(B, n_det, 5)`` boxes ``(cx, cy, w, l, yaw)`` with positive sizes."""
        self.require("det")
        b = self.det_box.data.copy()
        b[..., 2:4] = np.exp(b[..., 2:4])
        return b

    def box_classes(self) -> tuple[np.ndarray, np.ndarray]:
        """Most likely foreground class and confidence ``1 - p(background)``."""
        self.require("det")
        z = self.det_logits.data
        p = np.exp(z - z.max(-1, keepdims=True))
        p /= p.sum(-1, keepdims=True)
        return p[..., :N_AGENT_CLASSES].argmax(-1), 1.0 - p[..., N_AGENT_CLASSES]

    def polylines(self) -> np.ndarray:
        self.require("map")
        R = self.cfg.extent
        return np.clip(self.map_pts.data, -R, R)

    def polyline_classes(self) -> tuple[np.ndarray, np.ndarray]:
        self.require("map")
        z = self.map_logits.data
        p = np.exp(z - z.max(-1, keepdims=True))
        p /= p.sum(-1, keepdims=True)
        return p[..., :N_MAP_CLASSES].argmax(-1), 1.0 - p[..., N_MAP_CLASSES]

    def ego(self) -> np.ndarray:
        self.require("ego")
        return self.ego_status.data[:, 0]

    def occupancy_logits(self) -> np.ndarray:
        self.require("occ")
        return self.occupancy.data

    def trajectories(self) -> np.ndarray:
        """Per-mode future displacements ``(B, n_det, M, T, 2)``."""
        self.require("motion")
        return self.motion.data


# --- parameters --------------------------------------------------------------

def _mat(rng, n_in, n_out, scale=1.0) -> Tensor:
    return param(rng.standard_normal((n_in, n_out)) * (scale / math.sqrt(n_in)))


@dataclass
class AttnParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor

    @classmethod
    def init(cls, d, rng, out_scale=0.5):
        return cls(_mat(rng, d, d), _mat(rng, d, d), _mat(rng, d, d), _mat(rng, d, d, out_scale))

    def named(self, prefix):
        for n in ("wq", "wk", "wv", "wo"):
            yield f"{prefix}.{n}", getattr(self, n)


def _attend(x: Tensor, ctx: Tensor, p: AttnParams, allowed=None) -> Tensor:
    z = attention(ops.matmul(x, p.wq), ops.matmul(ctx, p.wk), ops.matmul(ctx, p.wv), allowed, heads=1)
    return ops.matmul(z, p.wo)


@dataclass
class DecoderBlock:
    temporal: AttnParams
    intra: AttnParams
    inter: AttnParams
    task_embed: Tensor
    offsets: Affine
    weights: Affine
    out: Affine
    heads: dict

    @classmethod
    def init(cls, cfg: PerceptionConfig, rng: np.random.Generator) -> "DecoderBlock":
        d = cfg.d_q
        S = cfg.n_samples
        offsets = Affine.init(d, 2 * S, rng, scale=0.1)
        # spread the initial sample pattern on a ring around the reference
        ang = 2 * np.pi * (np.arange(S) + 0.5) / cfg.samples
        offsets.b.data[:] = np.stack([np.cos(ang), np.sin(ang)], axis=1).reshape(-1) * 0.5
        heads = {}
        if "det" in cfg.tasks:
            heads["det"] = Affine.init(d, BOX_DIM + N_AGENT_CLASSES + 1, rng, scale=0.1)
        if "motion" in cfg.tasks:
            heads["motion"] = Affine.init(d, cfg.modes * cfg.horizon * 2 + cfg.modes, rng, scale=0.1)
        if "map" in cfg.tasks:
            heads["map"] = Affine.init(d, 2 * cfg.points + N_MAP_CLASSES + 1, rng, scale=0.1)
        if "ego" in cfg.tasks:
            heads["ego"] = Affine.init(d, EGO_DIM, rng, scale=0.1)
        return cls(AttnParams.init(d, rng), AttnParams.init(d, rng), AttnParams.init(d, rng),
                   param(rng.standard_normal((len(QUERY_TASKS), d)) * 0.5),
                   offsets, Affine.init(d, S, rng, scale=0.1), Affine.init(N_CHANNELS, d, rng, scale=0.5),
                   heads)

    def named(self, prefix):
        yield from self.temporal.named(f"{prefix}.temporal")
        yield from self.intra.named(f"{prefix}.intra")
        yield from self.inter.named(f"{prefix}.inter")
        yield f"{prefix}.inter.task_embed", self.task_embed
        yield from self.offsets.named(f"{prefix}.deform.offsets")
        yield from self.weights.named(f"{prefix}.deform.weights")
        yield from self.out.named(f"{prefix}.deform.out")
        for t in sorted(self.heads):
            yield from self.heads[t].named(f"{prefix}.head.{t}")


@dataclass
class OccupancyParams:
    latent: Tensor        # (G*G, d_o)
    wq: Tensor
    key: Affine
    value: Affine
    wo: Tensor
    head: Affine

    @classmethod
    def init(cls, cfg: PerceptionConfig, rng):
        G, d = cfg.occ_grid, cfg.d_o
        return cls(param(rng.standard_normal((G * G, d)) * 0.5), _mat(rng, d, d),
                   Affine.init(N_CHANNELS + 2, d, rng), Affine.init(N_CHANNELS + 2, d, rng),
                   _mat(rng, d, d, 0.5), Affine.init(d, 1, rng, scale=0.5))

    def named(self, prefix):
        yield f"{prefix}.latent", self.latent
        yield f"{prefix}.wq", self.wq
        yield from self.key.named(f"{prefix}.key")
        yield from self.value.named(f"{prefix}.value")
        yield f"{prefix}.wo", self.wo
        yield from self.head.named(f"{prefix}.head")


def _anchor_dim(cfg: PerceptionConfig, task: str) -> int:
    return {"det": BOX_DIM, "map": 2 * cfg.points, "ego": EGO_DIM}[task]


@dataclass
class PerceptionParams:
    cfg: PerceptionConfig
    d_model: int
    bank: dict            # task -> {"embed": Tensor, "anchor": Tensor}
    anchor_enc: dict      # task -> Affine
    blocks: list
    occ: OccupancyParams | None
    lift: dict            # task -> Affine (incl. "occ")
    back: dict            # task -> Affine

    @classmethod
    def init(cls, cfg: PerceptionConfig, d_model: int, rng: np.random.Generator,
             anchors: dict | None = None) -> "PerceptionParams":
        """``anchors`` maps task -> initial anchor rows (e.g. K-Means centroids)."""
        anchors = anchors or {}
        bank, enc, lift, back = {}, {}, {}, {}
        for t in QUERY_TASKS:
            n = cfg.count(t)
            if not n:
                continue
            a = anchors.get(t)
            if a is None:
                a = _default_anchors(cfg, t, n, rng)
            a = np.asarray(a, dtype=np.float64).reshape(n, _anchor_dim(cfg, t))
            bank[t] = {"embed": param(rng.standard_normal((n, cfg.d_q)) * 0.5), "anchor": param(a)}
            enc[t] = Affine.init(_anchor_dim(cfg, t), cfg.d_q, rng)
            lift[t] = Affine.init(cfg.d_q + _anchor_dim(cfg, t), d_model, rng)
            back[t] = Affine.init(d_model, cfg.d_q, rng, scale=0.5)
        occ = None
        if "occ" in cfg.tasks:
            occ = OccupancyParams.init(cfg, rng)
            lift["occ"] = Affine.init(cfg.d_o, d_model, rng)
        blocks = [DecoderBlock.init(cfg, rng) for _ in range(cfg.blocks_before + cfg.blocks_after)]
        return cls(cfg, d_model, bank, enc, blocks, occ, lift, back)

    def named_parameters(self, prefix: str = "perc"):
        for t in QUERY_TASKS:
            if t in self.bank:
                yield f"{prefix}.bank.{t}.embed", self.bank[t]["embed"]
                yield f"{prefix}.bank.{t}.anchor", self.bank[t]["anchor"]
                yield from self.anchor_enc[t].named(f"{prefix}.enc.{t}")
        for i, blk in enumerate(self.blocks):
            yield from blk.named(f"{prefix}.block{i}")
        if self.occ is not None:
            yield from self.occ.named(f"{prefix}.occ")
        for t in (*QUERY_TASKS, "occ"):
            if t in self.lift:
                yield from self.lift[t].named(f"{prefix}.lift.{t}")
        for t in QUERY_TASKS:
            if t in self.back:
                yield from self.back[t].named(f"{prefix}.back.{t}")


def _default_anchors(cfg, task, n, rng):
    R = cfg.extent
    if task == "det":
        xy = rng.uniform(-0.6 * R, 0.6 * R, size=(n, 2))
        return np.concatenate([xy, np.full((n, 2), np.log(2.0)), np.zeros((n, 1))], axis=1)
    if task == "map":
        y = rng.uniform(-0.3 * R, 0.3 * R, size=(n, 1))
        x = np.linspace(-0.8 * R, 0.8 * R, cfg.points)[None, :].repeat(n, axis=0)
        return np.stack([x, np.broadcast_to(y, x.shape)], axis=-1)
    return np.zeros((n, EGO_DIM))


def _anchor_scale(cfg, task) -> np.ndarray:
    R = cfg.extent
    if task == "det":
        return np.array([1 / R, 1 / R, 1.0, 1.0, 1.0])
    if task == "map":
        return np.full(2 * cfg.points, 1 / R)
    return np.ones(EGO_DIM)


# --- the decoder steps -------------------------------------------------------

def init_bank(params: PerceptionParams, batch: int, temporal_carry: Tensor | None = None) -> SparseQueryBank:
    """Fresh bank: learned embedding plus an encoding of each anchor."""
    cfg = params.cfg
    feats, state = [], {}
    for t in QUERY_TASKS:
        if t not in params.bank:
            continue
        n = cfg.count(t)
        emb, anc = params.bank[t]["embed"], params.bank[t]["anchor"]
        f = ops.add(emb, params.anchor_enc[t](ops.mul(anc, Tensor(_anchor_scale(cfg, t)))))
        feats.append(ops.broadcast_to(f, (batch, n, cfg.d_q)))
        a = ops.broadcast_to(anc, (batch,) + anc.shape)
        if t == "det":
            state["det_box"] = a
            state["det_logits"] = Tensor(np.zeros((batch, n, N_AGENT_CLASSES + 1)))
            if "motion" in cfg.tasks:
                state["motion"] = Tensor(np.zeros((batch, n, cfg.modes, cfg.horizon, 2)))
                state["mode_logits"] = Tensor(np.zeros((batch, n, cfg.modes)))
        elif t == "map":
            state["map_pts"] = ops.reshape(a, (batch, n, cfg.points, 2))
            state["map_logits"] = Tensor(np.zeros((batch, n, N_MAP_CLASSES + 1)))
        else:
            state["ego_status"] = a
    return SparseQueryBank(ops.concat(feats, axis=1), cfg, temporal_carry=temporal_carry, **state)


def query_interaction(bank: SparseQueryBank, blk: DecoderBlock) -> SparseQueryBank:
    cfg = bank.cfg
    f = bank.features
    if bank.temporal_carry is not None:
        f = ops.add(f, _attend(f, bank.temporal_carry, blk.temporal))
    ids = cfg.task_ids()
    f = ops.add(f, _attend(f, f, blk.intra, ids[:, None] == ids[None, :]))
    x = ops.add(f, ops.index(blk.task_embed, ids))
    f = ops.add(f, _attend(x, x, blk.inter))
    return bank.replace(features=f)


def _sample_grid(cfg: PerceptionConfig):
    """Per (level, view) affine maps from BEV metres to pixel row/column, shaped ``(1, L, V, 1, P)``."""
    L, V, P = cfg.n_levels, cfg.n_views, cfg.samples
    sx = np.zeros((1, L, V, 1, P))
    bx = np.zeros((1, L, V, 1, P))
    by = np.zeros((1, L, V, 1, P))
    for lvl in range(L):
        for v in range(V):
            x0, y0, cell, _ = view_geometry(v, lvl)
            sx[0, lvl, v] = 1.0 / cell
            bx[0, lvl, v] = -x0 / cell - 0.5
            by[0, lvl, v] = -y0 / cell - 0.5
    return sx, bx, by


def deformable_aggregate(features: Tensor, refs: Tensor, pyramid: FeaturePyramid, blk: DecoderBlock,
                         cfg: PerceptionConfig) -> Tensor:
    """Softmax-weighted bilinear samples around each reference point, added residually."""
    B, Q, _ = features.shape
    L, V, P = cfg.n_levels, cfg.n_views, cfg.samples
    S = cfg.n_samples
    off = ops.scale(ops.reshape(blk.offsets(features), (B, Q, L, V, P, 2)), cfg.offset_scale)
    off = ops.transpose(off, (0, 2, 3, 1, 4, 5))                      # (B, L, V, Q, P, 2)
    w = ops.reshape(ops.softmax(blk.weights(features)), (B, Q, 1, S))
    sx, bx, by = _sample_grid(cfg)
    rx = ops.reshape(ops.index(refs, (Ellipsis, 0)), (B, 1, 1, Q, 1))
    ry = ops.reshape(ops.index(refs, (Ellipsis, 1)), (B, 1, 1, Q, 1))
    row = ops.add(ops.mul(ops.add(rx, ops.index(off, (Ellipsis, 0))), Tensor(sx)), Tensor(bx))
    col = ops.add(ops.mul(ops.add(ry, ops.index(off, (Ellipsis, 1))), Tensor(sx)), Tensor(by))
    sampled = []
    for lvl in range(L):
        r = ops.reshape(ops.index(row, (slice(None), lvl)), (B, V, Q * P))
        c = ops.reshape(ops.index(col, (slice(None), lvl)), (B, V, Q * P))
        sampled.append(ops.reshape(ops.bilinear_sample(pyramid.level_map(lvl), c, r), (B, V, Q, P, -1)))
    # (B, L*V, Q, P, C) -> (B, Q, S, C) with samples ordered level, view, point
    stacked = ops.transpose(ops.concat(sampled, axis=1), (0, 2, 1, 3, 4))
    agg = ops.reshape(ops.matmul(w, ops.reshape(stacked, (B, Q, S, -1))), (B, Q, -1))
    return ops.add(features, blk.out(agg))


def task_refine(bank: SparseQueryBank, blk: DecoderBlock) -> SparseQueryBank:
    """Add each head's predicted deltas to the running outputs."""
    cfg = bank.cfg
    kw = {}
    B = bank.batch
    if "det" in cfg.tasks:
        f = bank.task_features("det")
        d = blk.heads["det"](f)
        kw["det_box"] = ops.add(bank.det_box, ops.index(d, (Ellipsis, slice(0, BOX_DIM))))
        kw["det_logits"] = ops.add(bank.det_logits, ops.index(d, (Ellipsis, slice(BOX_DIM, None))))
        if "motion" in cfg.tasks:
            m = blk.heads["motion"](f)
            k = cfg.modes * cfg.horizon * 2
            delta = ops.reshape(ops.index(m, (Ellipsis, slice(0, k))), bank.motion.shape)
            kw["motion"] = ops.add(bank.motion, delta)
            kw["mode_logits"] = ops.add(bank.mode_logits, ops.index(m, (Ellipsis, slice(k, None))))
    if "map" in cfg.tasks:
        d = blk.heads["map"](bank.task_features("map"))
        k = 2 * cfg.points
        kw["map_pts"] = ops.add(bank.map_pts, ops.reshape(ops.index(d, (Ellipsis, slice(0, k))),
                                                          (B, cfg.n_map, cfg.points, 2)))
        kw["map_logits"] = ops.add(bank.map_logits, ops.index(d, (Ellipsis, slice(k, None))))
    if "ego" in cfg.tasks:
        kw["ego_status"] = ops.add(bank.ego_status, blk.heads["ego"](bank.task_features("ego")))
    return bank.replace(**kw)


def decoder_block(bank: SparseQueryBank, blk: DecoderBlock, pyramid: FeaturePyramid) -> SparseQueryBank:
    bank = query_interaction(bank, blk)
    f = deformable_aggregate(bank.features, bank.reference_points(), pyramid, blk, bank.cfg)
    return task_refine(bank.replace(features=f), blk)


def _pooled_tokens(pyramid: FeaturePyramid) -> tuple[np.ndarray, np.ndarray]:
    """4x4-pooled finest level with normalised BEV centres -> ``(B, V*16, C+2)``."""
    cached = pyramid.__dict__.get("_pooled")
    if cached is not None:
        return cached
    lvl0 = pyramid.levels[0]
    B, V, H, W, C = lvl0.shape
    k = H // 4
    pooled = lvl0.reshape(B, V, 4, k, 4, k, C).mean(axis=(3, 5)).reshape(B, V * 16, C)
    pos = []
    for v in range(V):
        x0, y0, cell, _ = view_geometry(v, 0)
        c = (np.arange(4) + 0.5) * cell * k
        X, Y = np.meshgrid(x0 + c, y0 + c, indexing="ij")
        pos.append(np.stack([X, Y], axis=-1).reshape(16, 2) / geo.BEV_RANGE)
    pos = np.broadcast_to(np.concatenate(pos)[None], (B, V * 16, 2))
    pyramid.__dict__["_pooled"] = np.concatenate([pooled, pos], axis=-1)
    return pyramid.__dict__["_pooled"]


def occupancy_branch(pyramid: FeaturePyramid, occ: OccupancyParams, grid: int) -> tuple[Tensor, Tensor]:
    """Latent grid cross-attends to pooled features; returns ``(logits (B,G,G), latent (B,G*G,d_o))``."""
    kv = Tensor(_pooled_tokens(pyramid))
    B = kv.shape[0]
    n, d = occ.latent.shape
    if n != grid * grid:
        raise DimensionError(f"latent has {n} cells, expected {grid}x{grid}")
    q = ops.broadcast_to(ops.matmul(occ.latent, occ.wq), (B, n, d))
    k, v = occ.key(kv), occ.value(kv)
    att = ops.softmax(ops.scale(ops.matmul(q, ops.swap_last(k)), 1.0 / math.sqrt(d)))
    lat = ops.add(ops.matmul(ops.matmul(att, v), occ.wo), occ.latent)
    logits = ops.reshape(occ.head(lat), (B, grid, grid))
    return logits, lat


def outputs_from_bank(bank: SparseQueryBank, occupancy: Tensor | None) -> PerceptionOutputs:
    return PerceptionOutputs(bank.cfg, bank.det_box, bank.det_logits, bank.motion, bank.mode_logits,
                             bank.map_pts, bank.map_logits, bank.ego_status, occupancy)


@dataclass
class FirstPass:
    bank: SparseQueryBank
    outputs: PerceptionOutputs
    occ_latent: Tensor | None = None


def first_pass(params: PerceptionParams, pyramid: FeaturePyramid,
               temporal_carry: Tensor | None = None) -> FirstPass:
    cfg = params.cfg
    bank = init_bank(params, pyramid.batch, temporal_carry)
    for blk in params.blocks[:cfg.blocks_before]:
        bank = decoder_block(bank, blk, pyramid)
    occ_logits = lat = None
    if params.occ is not None:
        occ_logits, lat = occupancy_branch(pyramid, params.occ, cfg.occ_grid)
    return FirstPass(bank, outputs_from_bank(bank, occ_logits), lat)


def _task_vector(bank: SparseQueryBank, task: str) -> Tensor:
    cfg = bank.cfg
    if task == "det":
        raw = bank.det_box
    elif task == "map":
        raw = ops.reshape(bank.map_pts, (bank.batch, cfg.n_map, 2 * cfg.points))
    else:
        raw = bank.ego_status
    return ops.mul(raw, Tensor(_anchor_scale(cfg, task)))


def lift_to_expert(fp: FirstPass, params: PerceptionParams) -> Tensor:
    """Perception tokens ``(B, N_p, d)`` ordered det, map, ego, occupancy."""
    cfg = params.cfg
    bank = fp.bank
    toks = []
    for t in QUERY_TASKS:
        if t not in params.lift:
            continue
        x = ops.concat([bank.task_features(t), _task_vector(bank, t)], axis=-1)
        if params.lift[t].w.shape[0] != x.shape[-1]:
            raise DimensionError(f"lift for {t} expects width {params.lift[t].w.shape[0]}, got {x.shape[-1]}")
        toks.append(params.lift[t](x))
    if fp.occ_latent is not None:
        B = bank.batch
        G, k = cfg.occ_grid, cfg.occ_grid // OCC_POOL
        lat = ops.reshape(fp.occ_latent, (B, OCC_POOL, k, OCC_POOL, k, cfg.d_o))
        pooled = ops.reshape(ops.mean(lat, axis=(2, 4)), (B, OCC_POOL * OCC_POOL, cfg.d_o))
        toks.append(params.lift["occ"](pooled))
    out = ops.concat(toks, axis=1)
    if out.shape[-1] != params.d_model:
        raise DimensionError(f"lifted width {out.shape[-1]} != model width {params.d_model}")
    return out


def project_back_and_refine(o_per: Tensor, fp: FirstPass, params: PerceptionParams,
                            pyramid: FeaturePyramid) -> PerceptionOutputs:
    cfg = params.cfg
    if o_per.ndim != 3 or o_per.shape[1] != cfg.n_tokens or o_per.shape[2] != params.d_model:
        raise AlignmentError(f"perception outputs {o_per.shape} do not match the lift layout "
                             f"({cfg.n_tokens} tokens of width {params.d_model})")
    bank = fp.bank
    back = []
    for t, sl in cfg.query_slices().items():
        back.append(params.back[t](ops.index(o_per, (slice(None), sl))))
    bank = bank.replace(features=ops.add(bank.features, ops.concat(back, axis=1)))
    for blk in params.blocks[cfg.blocks_before:]:
        bank = decoder_block(bank, blk, pyramid)
    return outputs_from_bank(bank, fp.outputs.occupancy)

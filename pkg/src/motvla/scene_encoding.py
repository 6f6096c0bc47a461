"""Turn scenes into the understanding / perception / action token groups."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Affine, param, sinusoid_positions, time_embedding
from .numerics import Tensor, ops
from .vocab import COMMANDS, Vocabulary
from .worldgen import N_CHANNELS, SPEED_SCALE, T_HIST, Scene

K_VIS = 8
NON_TEXT = -1
EGO_IN = 2 * T_HIST + len(COMMANDS)
TIME_FREQS = 8


class DomainError(ValueError):
    pass


@dataclass
class EgoHistory:
    positions: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 2:
            raise ValueError(f"history must be T x 2, got {self.positions.shape}")
        if np.any(self.positions[-1] != 0.0):
            raise ValueError("the last history position must be the origin")


@dataclass
class TokenGroupBatch:
    und_embeddings: Tensor
    und_token_ids: np.ndarray
    per_embeddings: Tensor | None = None
    act_embeddings: Tensor | None = None
    flow_time: np.ndarray | None = None

    def __post_init__(self):
        if (self.act_embeddings is None) != (self.flow_time is None):
            raise ValueError("flow_time must accompany action tokens")

    @property
    def group_layout(self) -> tuple[int, int, int]:
        n_p = 0 if self.per_embeddings is None else self.per_embeddings.shape[1]
        n_a = 0 if self.act_embeddings is None else self.act_embeddings.shape[1]
        return self.und_embeddings.shape[1], n_p, n_a

    def groups(self) -> dict[str, Tensor]:
        B, _, d = self.und_embeddings.shape
        empty = Tensor(np.zeros((B, 0, d)))
        return {"und": self.und_embeddings,
                "per": self.per_embeddings if self.per_embeddings is not None else empty,
                "act": self.act_embeddings if self.act_embeddings is not None else empty}


# --- discrete inputs -----------------------------------------------------

def pooled_visual_features(level1: np.ndarray) -> np.ndarray:
    """4x4 average pooling of the coarse ``(V, 8, 8, C)`` maps -> ``(K_VIS, C)``."""
    V, H, W, C = level1.shape
    pooled = level1.reshape(V, H // 4, 4, W // 4, 4, C).mean(axis=(2, 4))
    out = pooled.reshape(-1, C)
    if out.shape[0] != K_VIS:
        raise ValueError(f"expected {K_VIS} pooled tokens, got {out.shape[0]}")
    return out


def _pad(ids: list[int], text_len: int, vocab: Vocabulary) -> np.ndarray:
    if len(ids) > text_len:
        raise ValueError(f"text of {len(ids)} tokens exceeds {text_len} slots")
    return np.array(ids + [vocab.pad] * (text_len - len(ids)), dtype=np.int64)


def caption_token_ids(vocab: Vocabulary, command: str, caption: str, text_len: int) -> np.ndarray:
    words = caption.split()
    return _pad([vocab.bos] + vocab.encode([command]) + vocab.encode(words) + [vocab.eos], text_len, vocab)


def general_token_ids(vocab: Vocabulary, sentence: str, text_len: int) -> np.ndarray:
    return _pad([vocab.bos] + vocab.encode(sentence.split()) + [vocab.eos], text_len, vocab)


def ego_nav_input(history: np.ndarray, nav: str) -> np.ndarray:
    if nav not in COMMANDS:
        raise ValueError(f"unknown navigation command {nav!r}")
    onehot = np.zeros(len(COMMANDS))
    onehot[COMMANDS.index(nav)] = 1.0
    return np.concatenate([np.asarray(history, dtype=np.float64).reshape(-1), onehot])


# --- learned encoders ----------------------------------------------------

@dataclass
class UnderstandingEncoder:
    """Token embeddings, visual-prefix lift and the ego/navigation token."""

    embed: Tensor
    vis: Affine
    ego: Affine

    @classmethod
    def init(cls, vocab_size: int, d: int, rng: np.random.Generator) -> "UnderstandingEncoder":
        return cls(param(rng.standard_normal((vocab_size, d)) * 0.5),
                   Affine.init(N_CHANNELS, d, rng), Affine.init(EGO_IN, d, rng, scale=0.5))

    @property
    def width(self) -> int:
        return self.embed.shape[1]

    def named_parameters(self, prefix: str = "enc"):
        yield f"{prefix}.embed", self.embed
        yield from self.vis.named(f"{prefix}.vis")
        yield from self.ego.named(f"{prefix}.ego")

    def __call__(self, vis_feats: np.ndarray, text_ids: np.ndarray, ego_in: np.ndarray):
        """Batch encode: ``(B, K_VIS, C)``, ``(B, L)``, ``(B, EGO_IN)`` -> ``(emb, ids)``."""
        B, L = text_ids.shape
        d = self.width
        vis = self.vis(Tensor(vis_feats))
        txt = ops.index(self.embed, text_ids)
        ego = ops.reshape(self.ego(Tensor(ego_in)), (B, 1, d))
        x = ops.concat([vis, txt, ego], axis=1)
        n_u = x.shape[1]
        x = ops.add(x, Tensor(sinusoid_positions(n_u, d)))
        ids = np.full((B, n_u), NON_TEXT, dtype=np.int64)
        ids[:, K_VIS:K_VIS + L] = text_ids
        return x, ids


def encode_understanding(scene: Scene, vocab: Vocabulary, encoder: UnderstandingEncoder, text_len: int):
    """Single-scene convenience wrapper; returns ``(Tensor[1, N_u, d], ids[1, N_u])``."""
    vis = pooled_visual_features(scene.feature_maps[1])[None]
    ids = caption_token_ids(vocab, scene.nav, scene.caption, text_len)[None]
    ego = ego_nav_input(scene.ego_history, scene.nav)[None]
    return encoder(vis, ids, ego)


def encode_ego_and_nav(hist: EgoHistory, nav: str, affine: Affine) -> Tensor:
    return ops.reshape(affine(Tensor(ego_nav_input(hist.positions, nav)[None])), (1, -1))


# --- flow-matching action tokens -------------------------------------------

@dataclass
class FlowSample:
    x0: np.ndarray
    x1: np.ndarray
    t: np.ndarray
    x_t: np.ndarray
    u: np.ndarray


def flow_interpolate(x1: np.ndarray, t, x0: np.ndarray) -> FlowSample:
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise DomainError(f"flow time outside [0, 1]: {t}")
    tb = t.reshape(t.shape + (1,) * (x1.ndim - t.ndim))
    x_t = (1.0 - tb) * x0 + tb * x1
    return FlowSample(x0=x0, x1=x1, t=t, x_t=x_t, u=x1 - x0)


def normalised_velocities(scene: Scene) -> np.ndarray:
    return scene.target_velocities / SPEED_SCALE


@dataclass
class ActionLift:
    """Affine lift of ``(x_t step, time embedding)`` plus a learned step embedding."""

    lift: Affine
    step_embed: Tensor

    @classmethod
    def init(cls, horizon: int, d: int, rng: np.random.Generator) -> "ActionLift":
        return cls(Affine.init(2 + 2 * TIME_FREQS, d, rng), param(rng.standard_normal((horizon, d)) * 0.5))

    def named_parameters(self, prefix: str = "act"):
        yield from self.lift.named(f"{prefix}.lift")
        yield f"{prefix}.step_embed", self.step_embed

    def __call__(self, x_t: np.ndarray, t: np.ndarray) -> Tensor:
        B, T, _ = x_t.shape
        temb = np.broadcast_to(time_embedding(t, TIME_FREQS)[:, None, :], (B, T, 2 * TIME_FREQS))
        return ops.add(self.lift(Tensor(np.concatenate([x_t, temb], axis=-1))), self.step_embed)


def make_action_tokens(target_velocities: np.ndarray, t, noise_seed, lift: ActionLift, x0=None):
    """Flow interpolant tokens; returns ``(act_embeddings, velocity_target, sample)``."""
    x1 = np.asarray(target_velocities, dtype=np.float64)
    if x0 is None:
        x0 = np.random.default_rng(noise_seed).standard_normal(x1.shape)
    s = flow_interpolate(x1, t, x0)
    return lift(s.x_t, s.t), s.u, s

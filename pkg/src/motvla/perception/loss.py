"""Set-prediction losses for the perception outputs."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..numerics import Tensor, ops
from ..numerics.memo import decision
from ..worldgen import SPEED_SCALE
from .assignment import assignment_margin, chamfer_matrix, hungarian
from .decoder import N_AGENT_CLASSES, N_MAP_CLASSES, PerceptionOutputs

DEFAULT_WEIGHTS = {"det": 1.0, "map": 1.0, "ego": 1.0, "motion": 1.0, "occ": 1.0}


@dataclass
class PerceptionTargets:
    agents: list            # per scene (N, 8): cx, cy, w, l, yaw, vx, vy, class
    futures: list           # per scene (N, T, 2)
    lanes: list             # per scene (K, P, 2)
    lane_classes: list      # per scene (K,)
    ego_status: np.ndarray  # (B, 2) speed / SPEED_SCALE, yaw rate
    occupancy: np.ndarray   # (B, G, G) in {0, 1}

    @classmethod
    def from_scenes(cls, scenes, grid: int) -> "PerceptionTargets":
        occ = []
        for s in scenes:
            full = s.occupancy.astype(np.float64)
            k = full.shape[0] // grid
            if k * grid != full.shape[0]:
                raise ValueError(f"occupancy grid {grid} does not divide {full.shape[0]}")
            occ.append(full.reshape(grid, k, grid, k).max(axis=(1, 3)))
        ego = np.stack([[s.ego_status[0] / SPEED_SCALE, s.ego_status[1]] for s in scenes])
        return cls([s.agents for s in scenes], [s.agent_future for s in scenes],
                   [s.lanes for s in scenes], [np.asarray(s.lane_classes, dtype=np.int64) for s in scenes],
                   ego, np.stack(occ))

    @property
    def batch(self) -> int:
        return len(self.agents)


@dataclass
class PerceptionLoss:
    total: Tensor
    terms: dict = field(default_factory=dict)       # name -> float
    det_match: tuple = ()                           # (scene idx, query idx, gt idx)
    parts: dict = field(default_factory=dict)       # name -> weighted Tensor


def _log_softmax_np(z: np.ndarray) -> np.ndarray:
    m = z.max(-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(-1, keepdims=True))


def box_targets(agents: np.ndarray) -> np.ndarray:
    return np.stack([agents[:, 0], agents[:, 1], np.log(agents[:, 2]), np.log(agents[:, 3]), agents[:, 4]], axis=1)


def match_detections(out: PerceptionOutputs, tgt: PerceptionTargets):
    """Per-scene assignment on centre L1 plus class NLL; returns index arrays."""
    return _match_detections(out.det_box, out.det_logits, tgt)


def _detection_costs(det_box: Tensor, det_logits: Tensor, tgt: PerceptionTargets):
    logp = _log_softmax_np(det_logits.data)
    for b in range(tgt.batch):
        a = tgt.agents[b]
        if len(a) == 0:
            continue
        centers = det_box.data[b, :, :2]
        yield b, np.abs(centers[:, None, :] - a[None, :, :2]).sum(-1) - logp[b][:, a[:, 7].astype(int)]


def _detection_radius(det_box, det_logits, tgt) -> float:
    # a max-norm move of delta shifts each cost entry by at most 4 delta (two
    # centre coordinates plus the log-softmax), so an assignment of m edges by 4 m delta
    r = float("inf")
    for _, cost in _detection_costs(det_box, det_logits, tgt):
        r = min(r, 0.5 * assignment_margin(cost) / (8 * cost.shape[1]))
    return r


@decision(radius=_detection_radius)
def _match_detections(det_box: Tensor, det_logits: Tensor, tgt: PerceptionTargets):
    bi, qi, gi = [], [], []
    for b, cost in _detection_costs(det_box, det_logits, tgt):
        rows, cols = hungarian(cost)
        bi.extend([b] * len(rows))
        qi.extend(rows)
        gi.extend(cols)
    return np.array(bi, dtype=np.int64), np.array(qi, dtype=np.int64), np.array(gi, dtype=np.int64)


def match_polylines(out: PerceptionOutputs, tgt: PerceptionTargets):
    """Per-scene assignment on Chamfer distance plus class NLL."""
    return _match_polylines(out.map_pts, out.map_logits, tgt)


def _polyline_costs(map_pts: Tensor, map_logits: Tensor, tgt: PerceptionTargets):
    logp = _log_softmax_np(map_logits.data)
    counts = [len(lanes) for lanes in tgt.lanes]
    if not sum(counts):
        return
    # Chamfer distances of every prediction to every lane in the batch, sliced per scene
    dist = chamfer_matrix(map_pts.data.reshape(-1, *map_pts.shape[2:]),
                          np.concatenate([np.asarray(x) for x, n in zip(tgt.lanes, counts) if n]))
    dist = dist.reshape(map_pts.shape[0], map_pts.shape[1], -1)
    start = 0
    for b, n in enumerate(counts):
        if n == 0:
            continue
        yield b, dist[b, :, start:start + n] - logp[b][:, tgt.lane_classes[b]]
        start += n


def _polyline_radius(map_pts, map_logits, tgt) -> float:
    # Chamfer moves by at most sqrt(2) delta and the log-softmax by 2 delta
    r = float("inf")
    for _, cost in _polyline_costs(map_pts, map_logits, tgt):
        r = min(r, 0.5 * assignment_margin(cost) / (2 * cost.shape[1] * (2 + np.sqrt(2))))
    return r


@decision(radius=_polyline_radius)
def _match_polylines(map_pts: Tensor, map_logits: Tensor, tgt: PerceptionTargets):
    bi, qi, gi = [], [], []
    for b, cost in _polyline_costs(map_pts, map_logits, tgt):
        rows, cols = hungarian(cost)
        bi.extend([b] * len(rows))
        qi.extend(rows)
        gi.extend(cols)
    return np.array(bi, dtype=np.int64), np.array(qi, dtype=np.int64), np.array(gi, dtype=np.int64)


def _gather(per_scene: list, bi: np.ndarray, gi: np.ndarray) -> np.ndarray:
    return np.stack([per_scene[b][g] for b, g in zip(bi, gi)])


def _yaw_radius(pred: Tensor, gt_yaw: np.ndarray) -> float:
    x = (pred.data[:, 4] - gt_yaw) / (2 * np.pi)
    return 0.5 * float((0.5 - np.abs(x - np.round(x))).min(initial=np.inf)) * 2 * np.pi


@decision(radius=_yaw_radius)
def _yaw_wrap(pred: Tensor, gt_yaw: np.ndarray) -> np.ndarray:
    """Multiple of 2*pi moving each target yaw onto the branch nearest the prediction."""
    return 2 * np.pi * np.round((pred.data[:, 4] - gt_yaw) / (2 * np.pi))


def _mode_radius(modes: Tensor, gt: np.ndarray) -> float:
    # each mean L1 distance moves by at most delta
    if modes.shape[1] < 2 or not len(gt):
        return float("inf")
    d = np.sort(np.abs(modes.data - gt[:, None]).mean(axis=(2, 3)), axis=1)
    return 0.5 * float((d[:, 1] - d[:, 0]).min()) / 2


@decision(radius=_mode_radius)
def _winning_modes(modes: Tensor, gt: np.ndarray) -> np.ndarray:
    """Index of the mode closest (mean L1) to each ground-truth future."""
    return np.abs(modes.data - gt[:, None]).mean(axis=(2, 3)).argmin(axis=1)


def _detection_loss(out, tgt, match):
    bi, qi, gi = match
    B, n = out.det_logits.shape[:2]
    cls_t = np.full((B, n), N_AGENT_CLASSES, dtype=np.int64)
    if not len(bi):
        return ops.mean(ops.nll_from_logits(out.det_logits, cls_t))
    gt = box_targets(_gather(tgt.agents, bi, gi))
    pred = ops.index(out.det_box, (bi, qi))
    gt[:, 4] += _yaw_wrap(pred, gt[:, 4].copy())
    l1 = ops.scale(ops.sum(ops.abs(ops.sub(pred, Tensor(gt)))), 1.0 / len(bi))
    cls_t[bi, qi] = _gather(tgt.agents, bi, gi)[:, 7].astype(np.int64)
    return ops.add(l1, ops.mean(ops.nll_from_logits(out.det_logits, cls_t)))


def _map_loss(out, tgt):
    bi, qi, gi = match_polylines(out, tgt)
    B, n = out.map_logits.shape[:2]
    cls_t = np.full((B, n), N_MAP_CLASSES, dtype=np.int64)
    if not len(bi):
        return ops.mean(ops.nll_from_logits(out.map_logits, cls_t))
    gt = _gather(tgt.lanes, bi, gi)
    pred = ops.index(out.map_pts, (bi, qi))
    l1 = ops.scale(ops.sum(ops.abs(ops.sub(pred, Tensor(gt)))), 1.0 / (len(bi) * gt.shape[1]))
    cls_t[bi, qi] = _gather(tgt.lane_classes, bi, gi)
    return ops.add(l1, ops.mean(ops.nll_from_logits(out.map_logits, cls_t)))


def _motion_loss(out, tgt, match):
    bi, qi, gi = match
    if not len(bi):
        return None
    gt = _gather(tgt.futures, bi, gi)                        # (M, T, 2)
    modes = ops.index(out.motion, (bi, qi))                  # (M, K, T, 2)
    win = _winning_modes(modes, gt)
    best = ops.index(modes, (np.arange(len(bi)), win))
    l1 = ops.scale(ops.sum(ops.abs(ops.sub(best, Tensor(gt)))), 1.0 / (len(bi) * gt.shape[1]))
    mode_nll = ops.mean(ops.nll_from_logits(ops.index(out.mode_logits, (bi, qi)), win))
    return ops.add(l1, mode_nll)


def perception_loss(out: PerceptionOutputs, tgt: PerceptionTargets, weights: dict | None = None,
                    tasks=None) -> PerceptionLoss:
    """Weighted sum of the enabled per-task losses.

    ``tasks`` restricts which terms are optimised (defaults to every task
    enabled in the perception config).
    """
    w = dict(DEFAULT_WEIGHTS, **(weights or {}))
    tasks = tuple(out.cfg.tasks if tasks is None else tasks)
    terms: dict[str, Tensor] = {}
    match = ()
    if "det" in tasks:
        out.require("det")
        match = match_detections(out, tgt)
        terms["det"] = _detection_loss(out, tgt, match)
    if "map" in tasks:
        out.require("map")
        terms["map"] = _map_loss(out, tgt)
    if "ego" in tasks:
        out.require("ego")
        terms["ego"] = ops.mean(ops.abs(ops.sub(ops.reshape(out.ego_status, tgt.ego_status.shape),
                                                Tensor(tgt.ego_status))))
    if "motion" in tasks:
        out.require("motion")
        if not match:
            match = match_detections(out, tgt)
        m = _motion_loss(out, tgt, match)
        if m is not None:
            terms["motion"] = m
    if "occ" in tasks:
        out.require("occ")
        terms["occ"] = ops.mean(ops.bce_with_logits(out.occupancy, tgt.occupancy))
    parts = {k: ops.scale(t, w[k]) for k, t in terms.items() if w[k]}
    total = Tensor(np.array(0.0))
    for t in parts.values():
        total = ops.add(total, t)
    return PerceptionLoss(total, {k: float(t.data) for k, t in terms.items()}, match, parts)

"""Dataset-level instance banks: K-Means over ground-truth anchors."""
from __future__ import annotations

import os

import numpy as np

from ..numerics import checkpoint
from .kmeans import kmeans_init
from .loss import box_targets


def build_instance_banks(scenes, n_det: int = 16, n_map: int = 8, seed: int = 0,
                         iters: int = 50) -> dict[str, np.ndarray]:
    """Centroids of detection boxes ``(n_det, 5)`` and map polylines ``(n_map, P, 2)``."""
    boxes = np.concatenate([box_targets(s.agents) for s in scenes if len(s.agents)])
    lanes = np.concatenate([s.lanes for s in scenes if len(s.lanes)])
    P = lanes.shape[1]
    det = kmeans_init(boxes, n_det, iters=iters, seed=seed).centroids
    mp = kmeans_init(lanes.reshape(len(lanes), -1), n_map, iters=iters, seed=seed + 1).centroids
    return {"det": det, "map": mp.reshape(n_map, P, 2)}


def save_banks(path: str | os.PathLike, banks: dict[str, np.ndarray]) -> None:
    checkpoint.save(path, {f"perc.kmeans.{k}": v for k, v in banks.items()})


def load_banks(path: str | os.PathLike) -> dict[str, np.ndarray]:
    raw = checkpoint.load(path)
    return {k.rsplit(".", 1)[1]: v for k, v in raw.items() if k.startswith("perc.kmeans.")}

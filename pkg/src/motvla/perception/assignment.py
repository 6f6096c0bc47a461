"""One-to-one matching between queries and ground truth."""
from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment


class CapacityError(ValueError):
    pass


def hungarian(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Minimum-cost assignment of every column (ground truth) to a distinct row (query).

    Returns ``(rows, cols)`` sorted by column.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n_q, n_gt = cost.shape
    if n_gt > n_q:
        raise CapacityError(f"{n_gt} ground-truth items but only {n_q} queries")
    if n_gt == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    cols, rows = linear_sum_assignment(cost.T)
    order = np.argsort(cols)
    return rows[order].astype(np.int64), cols[order].astype(np.int64)


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric mean nearest-point distance between two point sets."""
    d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    return 0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean())


def chamfer_matrix(preds: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """``chamfer`` for every (prediction, ground truth) pair of polyline sets."""
    dx = preds[:, None, :, None, 0] - gts[None, :, None, :, 0]
    dy = preds[:, None, :, None, 1] - gts[None, :, None, :, 1]
    d = np.sqrt(dx * dx + dy * dy)
    return 0.5 * (d.min(axis=3).mean(axis=2) + d.min(axis=2).mean(axis=2))


def assignment_margin(cost: np.ndarray) -> float:
    """Cost gap between the best and the second-best assignment (``inf`` if unique by structure).

    Any other assignment drops at least one edge of the optimum, so the
    second best is the cheapest re-solve with one optimal edge forbidden.
    """
    cost = np.asarray(cost, dtype=np.float64)
    rows, cols = hungarian(cost)
    if len(rows) == 0:
        return float("inf")
    best = cost[rows, cols].sum()
    second = float("inf")
    for r, c in zip(rows, cols):
        banned = cost.copy()
        banned[r, c] = np.inf
        try:
            cc, rr = linear_sum_assignment(banned.T)
        except ValueError:
            continue
        second = min(second, banned.T[cc, rr].sum())
    return float(second - best)

"""Lloyd's K-Means used to seed the query instance banks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class InsufficientSamplesError(ValueError):
    pass


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    objective: list[float]   # after initialisation, then after every iteration

    @property
    def final_objective(self) -> float:
        return self.objective[-1]


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=-1)


def kmeans_init(samples: np.ndarray, k: int, iters: int = 50, seed: int = 0) -> KMeansResult:
    """Cluster ``samples`` (N x a) into ``k`` centroids.

    Initial centroids are ``k`` distinct rows drawn uniformly without
    replacement.  A cluster that ends up empty is re-seeded at the sample
    currently farthest from its own centroid.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if n < k:
        raise InsufficientSamplesError(f"{n} samples cannot seed {k} clusters")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = np.random.default_rng(seed)
    c = x[rng.choice(n, size=k, replace=False)].copy()
    d = _sq_dists(x, c)
    labels = d.argmin(axis=1)
    history = [float(d[np.arange(n), labels].sum())]
    for _ in range(iters):
        for j in range(k):
            members = labels == j
            if members.any():
                c[j] = x[members].mean(axis=0)
        d = _sq_dists(x, c)
        labels = d.argmin(axis=1)
        for j in range(k):
            if not (labels == j).any():
                far = int(d[np.arange(n), labels].argmax())
                c[j] = x[far]
                d = _sq_dists(x, c)
                labels = d.argmin(axis=1)
        history.append(float(d[np.arange(n), labels].sum()))
        if history[-1] >= history[-2] and _converged(x, c, labels):
            break
    return KMeansResult(c, labels, history)


def _converged(x, c, labels) -> bool:
    for j in range(c.shape[0]):
        m = labels == j
        if m.any() and not np.allclose(c[j], x[m].mean(axis=0), atol=1e-12, rtol=0.0):
            return False
    return True

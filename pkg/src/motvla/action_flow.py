"""Flow-matching trajectory head: velocity prediction, loss, Euler sampling, metrics."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import geometry as geo
from .nn import Affine
from .numerics import Tensor, ops
from .worldgen import DT, HORIZON, SPEED_SCALE

L2_STEPS = {"1s": 1, "2s": 3, "3s": 5}   # waypoint index nearest each horizon at 2 Hz


class LayoutError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"non-finite state after Euler step {step}")
        self.step = step


@dataclass
class Trajectory:
    waypoints: np.ndarray
    dt: float = DT

    def __post_init__(self):
        self.waypoints = np.asarray(self.waypoints, dtype=np.float64)
        if self.waypoints.ndim != 2 or self.waypoints.shape[1] != 2:
            raise ValueError(f"waypoints must be T x 2, got {self.waypoints.shape}")
        if not np.all(np.isfinite(self.waypoints)):
            raise ValueError("waypoints must be finite")

    @property
    def horizon(self) -> int:
        return self.waypoints.shape[0]


def velocity_head(o_act: Tensor, head: Affine, horizon: int = HORIZON) -> Tensor:
    """Per-token affine map of the action outputs to a 2-D velocity field."""
    if o_act.shape[-2] != horizon:
        raise LayoutError(f"{o_act.shape[-2]} action tokens for a horizon of {horizon}")
    return head(o_act)


def flow_loss(v_hat: Tensor, u) -> Tensor:
    u = u if isinstance(u, Tensor) else Tensor(u)
    if v_hat.shape != u.shape:
        raise LayoutError(f"predicted field {v_hat.shape} vs target {u.shape}")
    diff = ops.sub(v_hat, u)
    return ops.mean(ops.mul(diff, diff))


def initial_noise(seed, shape) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(shape)


def integrate_flow(field: Callable[[np.ndarray, float], np.ndarray], x0: np.ndarray, steps: int) -> np.ndarray:
    """Forward Euler from t=0 to t=1 with ``steps`` equal steps."""
    if steps < 1:
        raise ValueError("need at least one Euler step")
    x = np.array(x0, dtype=np.float64)
    for i in range(steps):
        v = np.asarray(field(x, i / steps), dtype=np.float64)
        x = x + v / steps
        if not np.all(np.isfinite(x)):
            raise DivergenceError(i)
    return x


def waypoints_from_velocities(v: np.ndarray, dt: float = DT) -> np.ndarray:
    return np.cumsum(v, axis=-2) * dt


def sample_trajectory(field: Callable[[np.ndarray, float], np.ndarray], steps: int = 10, seed=0,
                      shape=(HORIZON, 2), dt: float = DT, speed_scale: float = SPEED_SCALE):
    """Draw noise, integrate the predicted field and decode waypoints.

    ``field(x, t)`` returns the velocity field for the (batched) normalised
    velocity state ``x``; for the full model it rebuilds the action tokens and
    reruns the forward pass.  Returns a :class:`Trajectory` for an unbatched
    ``shape`` and a list of them otherwise.
    """
    x1 = integrate_flow(field, initial_noise(seed, shape), steps)
    wps = waypoints_from_velocities(x1 * speed_scale, dt)
    if wps.ndim == 2:
        return Trajectory(wps, dt)
    return [Trajectory(w, dt) for w in wps]


@dataclass
class TrajectoryMetrics:
    l2_1s: float
    l2_2s: float
    l2_3s: float
    avg_l2: float
    collision: int

    def as_dict(self) -> dict:
        return {"l2_1s": self.l2_1s, "l2_2s": self.l2_2s, "l2_3s": self.l2_3s,
                "avg_l2": self.avg_l2, "collision": self.collision}


def trajectory_metrics(pred: Trajectory, gt: Trajectory, occupancy: np.ndarray,
                       heading0: float = 0.0) -> TrajectoryMetrics:
    if pred.horizon != gt.horizon or pred.dt != gt.dt:
        raise LayoutError("prediction and ground truth use different horizons or step sizes")
    d = np.linalg.norm(pred.waypoints - gt.waypoints, axis=1)
    l2 = [float(d[min(round(k / pred.dt) - 1, pred.horizon - 1)]) for k in (1, 2, 3)]
    hit = geo.trajectory_collides(pred.waypoints, occupancy, heading0=heading0)
    return TrajectoryMetrics(*l2, float(np.mean(l2)), int(hit))


def write_trajectories_csv(path: str | os.PathLike, rows) -> None:
    """``rows`` yields ``(scene_id, Trajectory)``; one CSV line per waypoint."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scene_id", "step", "x", "y"])
        for scene_id, traj in rows:
            for i, (x, y) in enumerate(traj.waypoints):
                w.writerow([scene_id, i, repr(float(x)), repr(float(y))])


def read_trajectories_csv(path: str | os.PathLike) -> dict:
    out: dict = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["scene_id"], []).append((int(row["step"]), float(row["x"]), float(row["y"])))
    return {k: Trajectory(np.array([[x, y] for _, x, y in sorted(v)])) for k, v in out.items()}

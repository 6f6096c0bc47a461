"""Micro-scale checks shared by the command line and the acceptance suite."""
from __future__ import annotations

import numpy as np

from .action_flow import initial_noise, integrate_flow
from .model import LOSS_TERMS, DrivingModel, ModelConfig, compute_losses, scene_batch
from .numerics import GradCheckReport, finite_diff_check
from .perception import PerceptionConfig
from .vocab import Vocabulary, driving_tokens
from .worldgen import generate_scene

# scenes 2 and 3 carry agents and lanes of every kind the losses match on
GRADCHECK_SCENES = (2, 3)


def micro_config(d: int = 16, layers: int = 2, heads: int = 2) -> ModelConfig:
    """Smallest full model: every expert, task head and loss term, at toy widths."""
    per = PerceptionConfig(d_q=4, n_det=4, n_map=4, samples=1, occ_grid=4, d_o=4,
                           blocks_before=1, blocks_after=1)
    return ModelConfig(d=d, heads=heads, layers=layers, perception=per)


def micro_model(seed: int = 0, d: int = 16, layers: int = 2) -> DrivingModel:
    return DrivingModel(micro_config(d, layers), Vocabulary(driving_tokens()), seed=seed)


def full_model_gradcheck(seed: int = 0, scenes=GRADCHECK_SCENES, d: int = 16, layers: int = 2,
                         eps: float = 1e-5, tol: float = 1e-4, terms=LOSS_TERMS) -> GradCheckReport:
    """Central differences over every parameter of the micro model on the total loss."""
    model = micro_model(seed, d, layers)
    batch = scene_batch([generate_scene(s) for s in scenes], model.vocab, model.cfg)
    return finite_diff_check(lambda: compute_losses(model, batch, terms).total, model.parameters(),
                             eps=eps, tol=tol)


# --- flow matching ------------------------------------------------------------------

def constant_field_error(x1: np.ndarray, steps: int, seed: int = 0) -> float:
    """Euler-integrate the exact field ``x1 - x0`` of a straight path; max deviation from ``x1``."""
    x0 = initial_noise(seed, np.shape(x1))
    x = integrate_flow(lambda x, t: x1 - x0, x0, steps)
    return float(np.abs(x - x1).max())


def linear_road_scenes(n: int = 64, start: int = 0) -> list:
    """First ``n`` straight-road scenes whose expert keeps a constant speed (no braking)."""
    out, seed = [], start
    while len(out) < n:
        sc = generate_scene(seed, road="straight")
        seed += 1
        v = sc.target_velocities
        if np.allclose(v, v[:1]):
            out.append(sc)
    return out


def sampled_endpoint_mse(model: DrivingModel, scenes: list, steps: int = 10, seed: int = 0) -> float:
    """Mean squared error between Euler-sampled ``x(1)`` and the true normalised velocities."""
    batch = scene_batch(scenes, model.vocab, model.cfg)
    x = integrate_flow(model.velocity_field(batch), initial_noise(seed, batch.x1.shape), steps)
    return float(np.mean((x - batch.x1) ** 2))


def flow_toy(seed: int = 0, n: int = 64, epochs: int = 30, lr: float = 3e-3, steps: int = 10) -> dict:
    """Train only the action objective on linear-road scenes and score the held-out split."""
    from .training import StagePlan, run_stage

    scenes = linear_road_scenes(n)
    n_train = int(round(0.8 * n))
    train, val = scenes[:n_train], scenes[n_train:]
    model = DrivingModel(ModelConfig(d=32, heads=4, layers=2), Vocabulary(), seed=seed)
    model.stage_done = 1
    plan = StagePlan(stage=2, epochs=epochs, base_lr=lr, terms=("act",))
    result = run_stage(plan, train, model, seed=seed)
    return {"val_mse": sampled_endpoint_mse(model, val, steps, seed),
            "train_mse": sampled_endpoint_mse(model, train[:16], steps, seed),
            "final_flow_loss": result.log[-1]["act"] if result.log else float("nan")}


# --- exact properties of the expert stack ---------------------------------------------------

def _random_stack(rng, d: int = 16, heads: int = 2, layers: int = 2):
    from .mot import EXPERTS, MoTStack, build_mask
    from .numerics import Tensor

    layout = tuple(int(n) for n in rng.integers(1, 6, size=3))
    stack = MoTStack.init(d, heads, layers, 8, rng)
    groups = {g: Tensor(rng.standard_normal((2, n, d))) for g, n in zip(EXPERTS, layout)}
    return stack, groups, build_mask(layout)


def blindness_check(draws: int = 100, seed: int = 0) -> int:
    """Count draws where perturbing later groups changes any byte of an earlier group's output."""
    from .mot import stack_forward
    from .numerics import Tensor

    failures = 0
    for i in range(draws):
        rng = np.random.default_rng([seed, i])
        stack, g, mask = _random_stack(rng)
        base, _ = stack_forward(g, stack, mask)
        noisy = {k: Tensor(rng.standard_normal(v.shape) * 10.0) for k, v in g.items()}
        out_pa, _ = stack_forward(dict(g, per=noisy["per"], act=noisy["act"]), stack, mask)
        out_a, _ = stack_forward(dict(g, act=noisy["act"]), stack, mask)
        if (base["und"].data.tobytes() != out_pa["und"].data.tobytes()
                or base["per"].data.tobytes() != out_a["per"].data.tobytes()):
            failures += 1
    return failures


def equivalence_check(seeds: int = 20) -> float:
    """Largest deviation between the tied expert stack and the single-weight-set reference."""
    from .mot import EXPERTS, monolithic_reference_forward, stack_forward
    from .numerics import ops

    worst = 0.0
    for s in range(seeds):
        rng = np.random.default_rng(s)
        stack, g, mask = _random_stack(rng)
        for layer in stack.layers:
            for e in ("per", "act"):
                layer.experts[e].copy_from(layer.experts["und"])
        out, _ = stack_forward(g, stack, mask)
        x = ops.concat([g[k] for k in EXPERTS], axis=1)
        for layer in stack.layers:
            x = monolithic_reference_forward(x, layer.experts["und"], mask.allowed, layer.heads)
        got = np.concatenate([out[k].data for k in EXPERTS], axis=1)
        worst = max(worst, float(np.abs(got - x.data).max()))
    return worst


def mask_check(max_len: int = 5) -> bool:
    """Block structure of the visibility mask for every layout up to ``max_len`` per group."""
    from .mot import build_mask

    for nu in range(max_len + 1):
        for np_ in range(max_len + 1):
            for na in range(max_len + 1):
                if nu + np_ + na == 0:
                    continue
                a = build_mask((nu, np_, na)).allowed
                want = np.zeros_like(a)
                want[:nu, :nu] = np.tril(np.ones((nu, nu), bool))
                want[nu:nu + np_, :nu + np_] = True
                want[nu + np_:, :] = True
                if not np.array_equal(a, want):
                    return False
    return True

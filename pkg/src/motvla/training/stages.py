"""The three-stage progressive schedule: plans, parameter groups and the stage runner."""
from __future__ import annotations

import csv
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..model import LOSS_TERMS, DrivingModel, caption_batch, compute_losses, general_sentences, scene_batch
from ..mot import PROJECTIONS
from ..numerics import Tape, backward, checkpoint
from .lora import attach_lora
from .optim import AdamW, EmaState, clip_global_norm

GROUPS = ("und", "per", "act")
DRIVING_SHARE = 0.3          # stage-1 mixture: 3 driving captions to 7 generic sentences

_MOT = re.compile(r"^mot\.(?:layer\d+|final_ln)\.(und|per|act|shared)\.")


class StageOrderError(RuntimeError):
    """A stage was started from a model that has not finished the stage before it."""


class PlanError(ValueError):
    pass


def param_group(name: str) -> str:
    """Which expert side a parameter belongs to.

    Embeddings and the LM head count as understanding-side.  The tied
    decoder of the shared-weight variant forms its own ``shared`` group.
    """
    m = _MOT.match(name)
    if m:
        return m.group(1)
    if name.startswith(("enc.", "mot.lm_head")):
        return "und"
    if name.startswith("perc."):
        return "per"
    if name.startswith("act."):
        return "act"
    raise KeyError(f"parameter {name!r} belongs to no group")


def is_lora_base(name: str) -> bool:
    """Understanding-side projection matrices that LoRA wraps (frozen while adapted)."""
    m = _MOT.match(name)
    return bool(m) and param_group(name) == "und" and name.rsplit(".", 1)[1] in PROJECTIONS


@dataclass
class StagePlan:
    stage: int
    epochs: int
    base_lr: float
    lr_multipliers: dict = field(default_factory=dict)
    frozen: tuple = ()
    terms: tuple = ("ar",)
    lora_enabled: bool = False
    ema_decay: float | None = None
    lambdas: dict = field(default_factory=dict)
    batch: int = 8
    steps_per_epoch: int = 16
    clip: float = 1.0
    lora_rank: int = 8
    lora_alpha: float = 16.0

    def __post_init__(self):
        self.frozen, self.terms = tuple(self.frozen), tuple(self.terms)
        if self.stage not in (1, 2, 3):
            raise PlanError(f"stage must be 1, 2 or 3, got {self.stage}")
        if not self.terms or set(self.terms) - set(LOSS_TERMS):
            raise PlanError(f"terms {self.terms} must be a non-empty subset of {LOSS_TERMS}")
        bad = (set(self.frozen) | set(self.lr_multipliers)) - set(GROUPS)
        if bad:
            raise PlanError(f"unknown parameter groups {sorted(bad)}")
        if self.epochs < 0 or self.batch < 1 or self.steps_per_epoch < 1:
            raise PlanError("epochs, batch and steps_per_epoch must be non-negative / positive")
        if self.ema_decay is not None and not 0.0 <= self.ema_decay < 1.0:
            raise PlanError(f"ema decay {self.ema_decay} outside [0, 1)")

    def lr(self, group: str) -> float:
        """Effective learning rate of a parameter group (0 when frozen).

        The tied decoder of the shared-weight variant is frozen with the
        understanding side but otherwise trains in full at the base rate,
        since it alone carries the perception and action tokens.
        """
        if group in self.frozen or (group == "shared" and "und" in self.frozen):
            return 0.0
        return self.base_lr * self.lr_multipliers.get(group, 1.0)


def default_plan(stage: int, **overrides) -> StagePlan:
    """Stage defaults: caption anchoring, joint training, perception/action refinement."""
    base = {
        1: dict(epochs=3, base_lr=4e-5, frozen=("per", "act"), terms=("ar",)),
        2: dict(epochs=30, base_lr=2e-4, lr_multipliers={"und": 0.5}, terms=("ar", "per", "act"),
                lora_enabled=True, ema_decay=0.99),
        3: dict(epochs=15, base_lr=1e-4, frozen=("und",), terms=("per", "act", "motion"), ema_decay=0.99),
    }[stage]
    base.update({k: v for k, v in overrides.items() if v is not None})
    return StagePlan(stage=stage, **base)


def plan_from_config(cfg: dict, stage: int) -> StagePlan:
    tr = cfg["train"]
    plan = default_plan(stage, epochs=tr["epochs"], base_lr=tr["base_lr"], batch=tr["batch"],
                        steps_per_epoch=tr["steps_per_epoch"], clip=tr["clip"],
                        lora_rank=tr["lora_rank"], lora_alpha=tr["lora_alpha"])
    if stage == 2:
        plan.lr_multipliers = {"und": tr["lr_mult_und"]}
    if stage > 1:
        plan.ema_decay = tr["ema_decay"]
    plan.lambdas = {k: tr[f"lambda_{k}"] for k in LOSS_TERMS}
    return plan


def trainable(model: DrivingModel, plan: StagePlan) -> dict:
    """Parameters updated under ``plan``, with their group."""
    out = {}
    for name, p in model.named_parameters():
        if plan.lr(param_group(name)) == 0.0:
            continue
        if plan.lora_enabled and is_lora_base(name):
            continue
        out[name] = p
    return out


# --- checkpoints -----------------------------------------------------------------

def save_stage(path: str | os.PathLike, model: DrivingModel, stage: int, ema: EmaState | None = None,
               lora_alpha: float = 16.0) -> None:
    table = {"meta.stage": np.array(float(stage)), "meta.lora_alpha": np.array(float(lora_alpha))}
    table.update(model.state_dict())
    if ema is not None:
        table.update({f"ema.{k}": v for k, v in sorted(ema.shadow.items())})
    checkpoint.save(path, table)


def load_stage(path: str | os.PathLike, model: DrivingModel) -> EmaState | None:
    """Load a stage checkpoint into ``model``; attaches adapters the checkpoint carries."""
    table = checkpoint.load(path)
    if "meta.stage" not in table:
        raise StageOrderError(f"{path} is not a stage checkpoint")
    ranks = {v.shape[1] for k, v in table.items() if k.endswith(".lora_a") and not k.startswith("ema.")}
    if ranks:
        attach_lora(model.stack, r=ranks.pop(), alpha=float(table["meta.lora_alpha"]))
    model.load_state_dict({k: v for k, v in table.items() if not k.startswith(("meta.", "ema."))})
    model.stage_done = int(table["meta.stage"])
    shadow = {k[4:]: v for k, v in table.items() if k.startswith("ema.")}
    return EmaState(0.0, shadow) if shadow else None


# --- data streams -------------------------------------------------------------------

def _index_stream(n: int, rng: np.random.Generator):
    while True:
        yield from rng.permutation(n)


def stage_batches(plan: StagePlan, scenes: list, model: DrivingModel, rng: np.random.Generator):
    """Endless batch stream for a stage: the 3:7 caption mixture in stage 1, full scenes after."""
    stream = _index_stream(len(scenes), rng)
    if plan.stage == 1:
        pool = general_sentences(256, int(rng.integers(1 << 31)))
        gen = _index_stream(len(pool), rng)
        while True:
            items = [scenes[next(stream)] if rng.random() < DRIVING_SHARE else pool[next(gen)]
                     for _ in range(plan.batch)]
            yield caption_batch(items, model.vocab, model.cfg)
    while True:
        picked = [scenes[next(stream)] for _ in range(plan.batch)]
        yield scene_batch(picked, model.vocab, model.cfg, rng=rng)


# --- the runner ------------------------------------------------------------------------

@dataclass
class StageResult:
    model: DrivingModel
    log: list = field(default_factory=list)
    ema: EmaState | None = None


LOG_FIELDS = ("stage", "epoch", *LOSS_TERMS, *(f"lr_{g}" for g in GROUPS))


def run_stage(plan: StagePlan, scenes: list, model: DrivingModel, seed: int = 0,
              log_path: str | os.PathLike | None = None, checkpoint_path: str | os.PathLike | None = None,
              on_step=None) -> StageResult:
    """Train ``model`` in place for one stage; writes a per-epoch CSV and a checkpoint."""
    if not scenes:
        raise ValueError("empty training set")
    done = getattr(model, "stage_done", 0)
    if done != plan.stage - 1:
        raise StageOrderError(f"stage {plan.stage} needs a model that finished stage {plan.stage - 1}; "
                              f"this one finished stage {done}")
    if plan.lora_enabled:
        attach_lora(model.stack, r=plan.lora_rank, alpha=plan.lora_alpha,
                    rng=np.random.default_rng([seed, plan.stage, 1]))
    params = trainable(model, plan)
    lrs = {k: plan.lr(param_group(k)) for k in params}
    opt = AdamW()
    ema = EmaState.init(params, plan.ema_decay) if plan.ema_decay is not None else None
    rng = np.random.default_rng([seed, plan.stage])
    batches = stage_batches(plan, scenes, model, rng)
    log = []
    for epoch in range(1, plan.epochs + 1):
        sums = {k: 0.0 for k in plan.terms}
        for step in range(plan.steps_per_epoch):
            batch = next(batches)
            with Tape() as tape:
                losses = compute_losses(model, batch, plan.terms, plan.lambdas)
            grads = backward(tape, losses.total, params)
            clip_global_norm(grads, plan.clip)
            opt.step(params, grads, lrs)
            if ema is not None:
                ema.update(params)
            for k in plan.terms:
                sums[k] += losses.terms.get(k, 0.0)
            if on_step is not None:
                on_step(epoch, step, losses)
        row = {"stage": plan.stage, "epoch": epoch}
        row.update({k: (sums[k] / plan.steps_per_epoch if k in sums else "") for k in LOSS_TERMS})
        row.update({f"lr_{g}": plan.lr(g) for g in GROUPS})
        log.append(row)
    model.stage_done = plan.stage
    if log_path is not None:
        write_log(log_path, log)
    if checkpoint_path is not None:
        save_stage(checkpoint_path, model, plan.stage, ema, plan.lora_alpha)
    return StageResult(model, log, ema)


def write_log(path: str | os.PathLike, rows: list) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=LOG_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def with_ema(result: StageResult):
    """Context manager evaluating ``result.model`` with its EMA weights swapped in."""
    return _EmaSwap(result.model, result.ema)


class _EmaSwap:
    def __init__(self, model: DrivingModel, ema: EmaState | None):
        self.model, self.ema = model, ema

    def __enter__(self):
        if self.ema is not None:
            self.ema.swap(self.model.parameters())
        return self.model

    def __exit__(self, *exc):
        if self.ema is not None:
            self.ema.swap(self.model.parameters())


__all__ = ["GROUPS", "StagePlan", "StageOrderError", "PlanError", "StageResult", "default_plan",
           "plan_from_config", "param_group", "trainable", "run_stage", "save_stage", "load_stage",
           "write_log", "with_ema"]

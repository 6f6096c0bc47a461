from .lora import LoraAdapter, attach_lora, lora_apply, lora_merge, merge_all
from .optim import AdamW, AdamState, EmaState, adamw_step, clip_global_norm, ema_swap, ema_update
from .stages import (GROUPS, PlanError, StageOrderError, StagePlan, StageResult, default_plan, load_stage,
                     param_group, plan_from_config, run_stage, save_stage, trainable, with_ema, write_log)

__all__ = [
    "LoraAdapter", "attach_lora", "lora_apply", "lora_merge", "merge_all",
    "AdamW", "AdamState", "EmaState", "adamw_step", "clip_global_norm", "ema_swap", "ema_update",
    "GROUPS", "PlanError", "StageOrderError", "StagePlan", "StageResult", "default_plan", "load_stage",
    "param_group", "plan_from_config", "run_stage", "save_stage", "trainable", "with_ema", "write_log",
]

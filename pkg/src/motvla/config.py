"""JSON run configuration with dot-path overrides."""
from __future__ import annotations

import copy
import json
import os
from pathlib import Path

from .model import ModelConfig
from .perception import PerceptionConfig
from .scene_encoding import K_VIS
from .worldgen import HORIZON

DEFAULTS = {
    "model": {"d": 64, "heads": 4, "layers": 4, "shared": False},
    "tokens": {"n_u": K_VIS + 11 + 1, "n_p": {"det": 16, "map": 8, "ego": 1, "occ": 16}, "n_a": HORIZON},
    "train": {
        "stage": 1, "epochs": None, "base_lr": None, "lr_mult_und": 0.5,
        "lambda_ar": 1.0, "lambda_per": 1.0, "lambda_act": 1.0, "lambda_motion": 1.0,
        "ema_decay": 0.99, "seed": 0, "batch": 8, "steps_per_epoch": 16,
        "lora_rank": 8, "lora_alpha": 16.0, "clip": 1.0,
    },
    "data": {"n_scenes": 512, "seed": 0},
    "flow": {"euler_steps": 10},
    "out": "runs",
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, extra: dict, path: str = "") -> dict:
    for k, v in extra.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict) and not isinstance(v, dict):
            raise ConfigError(f"{where!r} must be an object")
        if isinstance(base[k], dict) and where != "tokens.n_p":
            _merge(base[k], v, where + ".")
        else:
            base[k] = v
    return base


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_override(cfg: dict, dotted: str, raw) -> None:
    """Set ``cfg[a][b]...`` from a ``a.b.c`` path; the key must already exist."""
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[k]
    if keys[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[keys[-1]] = _parse_value(raw) if isinstance(raw, str) else raw


def load_config(path: str | os.PathLike | None = None, overrides: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            user = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config root must be an object")
        _merge(cfg, user)
    for k, v in (overrides or {}).items():
        apply_override(cfg, k, v)
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    m, tok, tr = cfg["model"], cfg["tokens"], cfg["train"]
    for k in ("d", "heads", "layers"):
        if not isinstance(m[k], int) or m[k] < 1:
            raise ConfigError(f"model.{k} must be a positive integer")
    if m["d"] % m["heads"]:
        raise ConfigError(f"model.d={m['d']} not divisible by model.heads={m['heads']}")
    if tok["n_a"] != HORIZON:
        raise ConfigError(f"tokens.n_a must equal the trajectory horizon {HORIZON}")
    if tok["n_u"] < K_VIS + 3:
        raise ConfigError(f"tokens.n_u must leave room for BOS/EOS after {K_VIS} visual tokens")
    n_p = tok["n_p"]
    if set(n_p) - {"det", "map", "ego", "occ"} or n_p.get("ego", 1) != 1:
        raise ConfigError("tokens.n_p takes det/map/occ counts and ego=1")
    occ = n_p.get("occ", 16)
    if occ not in (0, 16):
        raise ConfigError("tokens.n_p.occ is 16 (pooled occupancy tokens) or 0 (disabled)")
    if tr["stage"] not in (1, 2, 3):
        raise ConfigError("train.stage must be 1, 2 or 3")
    for k in ("batch", "steps_per_epoch", "lora_rank"):
        if not isinstance(tr[k], int) or tr[k] < 1:
            raise ConfigError(f"train.{k} must be a positive integer")
    if cfg["data"]["n_scenes"] < 10:
        raise ConfigError("data.n_scenes must be at least 10")
    if cfg["flow"]["euler_steps"] < 1:
        raise ConfigError("flow.euler_steps must be at least 1")


def model_config(cfg: dict) -> ModelConfig:
    m, n_p = cfg["model"], cfg["tokens"]["n_p"]
    tasks = ("det", "map", "ego", "motion") + (("occ",) if n_p.get("occ", 16) else ())
    per = PerceptionConfig(n_det=n_p.get("det", 16), n_map=n_p.get("map", 8), tasks=tasks)
    return ModelConfig(d=m["d"], heads=m["heads"], layers=m["layers"], text_len=cfg["tokens"]["n_u"] - K_VIS - 1,
                       shared=bool(m["shared"]), perception=per)


def dumps(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True)

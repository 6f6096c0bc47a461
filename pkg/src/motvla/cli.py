"""Command line entry point: data, staged training, evaluation, probing and checks."""
from __future__ import annotations

import argparse
import filecmp
import os
import sys
import tempfile
import time
from pathlib import Path

from . import worldgen
from .config import DEFAULTS, ConfigError, load_config, model_config
from .model import DrivingModel
from .perception import build_instance_banks
from .vocab import Vocabulary

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _flatten(d: dict, prefix: str = "") -> list[tuple[str, object]]:
    out = []
    for k, v in d.items():
        if isinstance(v, dict) and k != "n_p":
            out += _flatten(v, f"{prefix}{k}.")
        else:
            out.append((f"{prefix}{k}", v))
    return out


KEYS_HELP = "configuration keys (override with --key.path=VALUE, values parsed as JSON):\n" + "\n".join(
    f"  {k:<24} default {v!r}" for k, v in _flatten(DEFAULTS)) + (
    "\n\nenvironment:\n  UDVLA_OUT                overrides the output directory (key 'out')")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="motvla", description=__doc__, epilog=KEYS_HELP,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, help_):
        sp = sub.add_parser(name, help=help_, epilog=KEYS_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.add_argument("--config", help="JSON config file")
        return sp

    add("gen-data", "generate the scene cache, or verify an existing one")
    tr = add("train", "run one training stage or all three")
    group = tr.add_mutually_exclusive_group(required=True)
    group.add_argument("--stage", type=int, choices=(1, 2, 3))
    group.add_argument("--all", action="store_true")
    ev = add("eval", "planning/perception/caption metrics of a checkpoint")
    ev.add_argument("--checkpoint", help="defaults to the latest stage checkpoint in the output directory")
    ev.add_argument("--split", default="test", choices=("train", "val", "test"))
    pr = add("probe", "shared vs separate experts: cosine probe, forgetting and planning")
    pr.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    gc = add("gradcheck", "finite-difference check of every parameter on a micro-batch")
    gc.add_argument("--eps", type=float, default=1e-5)
    gc.add_argument("--tol", type=float, default=1e-4)
    add("selftest", "exact-property suite: blindness, tied equivalence, mask layout")
    return p


def _split_overrides(extra: list[str]) -> tuple[dict, list[str]]:
    overrides, unknown = {}, []
    it = iter(extra)
    for tok in it:
        if not tok.startswith("--") or "." not in tok:
            unknown.append(tok)
            continue
        key, eq, val = tok[2:].partition("=")
        if not eq:
            val = next(it, None)
            if val is None:
                unknown.append(tok)
                continue
        overrides[key] = val
    return overrides, unknown


def _out_dir(cfg: dict) -> Path:
    return Path(os.environ.get("UDVLA_OUT") or cfg["out"])


def _dataset(cfg: dict) -> worldgen.Dataset:
    root = _out_dir(cfg) / "data"
    if (root / "split.json").exists():
        return worldgen.read_cache(root)
    return worldgen.dataset(cfg["data"]["n_scenes"], cfg["data"]["seed"])


def _new_model(cfg: dict, ds: worldgen.Dataset) -> DrivingModel:
    mc = model_config(cfg)
    seed = cfg["train"]["seed"]
    banks = build_instance_banks(ds.split("train"), mc.perception.n_det, mc.perception.n_map, seed)
    return DrivingModel(mc, Vocabulary(), seed=seed, anchors=banks)


# --- subcommands ---------------------------------------------------------------------------

def cmd_gen_data(cfg: dict, args) -> int:
    root = _out_dir(cfg) / "data"
    ds = worldgen.dataset(cfg["data"]["n_scenes"], cfg["data"]["seed"])
    if not (root / "split.json").exists():
        files = worldgen.write_cache(ds, root)
        print(f"wrote {len(ds.scenes)} scenes ({len(files)} files) to {root}")
        return EXIT_OK
    with tempfile.TemporaryDirectory() as tmp:
        fresh = worldgen.write_cache(ds, tmp)
        names = [f.name for f in fresh]
        match, mismatch, errors = filecmp.cmpfiles(root, tmp, names, shallow=False)
    extra = {p.name for p in root.iterdir()} - set(names)
    if mismatch or errors or extra:
        print(f"cache {root} differs from a fresh build: {sorted(mismatch + errors + sorted(extra))[:5]}",
              file=sys.stderr)
        return EXIT_FAIL
    print(f"cache {root} verified: {len(match)} files identical")
    return EXIT_OK


def cmd_train(cfg: dict, args) -> int:
    from .training import StageOrderError, load_stage, plan_from_config, run_stage

    out = _out_dir(cfg)
    ds = _dataset(cfg)
    stages = (1, 2, 3) if args.all else (args.stage,)
    model = _new_model(cfg, ds)
    if stages[0] > 1:
        prev = out / f"stage{stages[0] - 1}.ckpt"
        if not prev.exists():
            raise StageOrderError(f"stage {stages[0]} needs the stage-{stages[0] - 1} checkpoint {prev}")
        load_stage(prev, model)
    for stage in stages:
        t0 = time.time()
        plan = plan_from_config(cfg, stage)
        result = run_stage(plan, ds.split("train"), model, cfg["train"]["seed"],
                           log_path=out / f"stage{stage}.csv", checkpoint_path=out / f"stage{stage}.ckpt")
        last = result.log[-1] if result.log else {}
        losses = " ".join(f"{k}={last[k]:.4f}" for k in plan.terms if isinstance(last.get(k), float))
        print(f"stage {stage}: {plan.epochs} epochs in {time.time() - t0:.1f}s  {losses}")
    return EXIT_OK


def _latest_checkpoint(out: Path) -> Path:
    for s in (3, 2, 1):
        if (out / f"stage{s}.ckpt").exists():
            return out / f"stage{s}.ckpt"
    raise ConfigError(f"no stage checkpoint in {out}; run 'train' first")


def cmd_eval(cfg: dict, args) -> int:
    from .probe import evaluate, write_metrics_csv
    from .training import StageResult, load_stage, with_ema

    out = _out_dir(cfg)
    ds = _dataset(cfg)
    path = Path(args.checkpoint) if args.checkpoint else _latest_checkpoint(out)
    model = _new_model(cfg, ds)
    ema = load_stage(path, model)
    with with_ema(StageResult(model, [], ema)):
        metrics = evaluate(model, ds.split(args.split), cfg["flow"]["euler_steps"], cfg["train"]["seed"])
    tag = "shared" if cfg["model"]["shared"] else "mot"
    write_metrics_csv(out / "metrics.csv", [(tag, cfg["train"]["seed"], args.split, metrics)])
    for k, v in sorted(metrics.items()):
        print(f"{k:<16} {v:.4f}")
    return EXIT_OK


def cmd_probe(cfg: dict, args) -> int:
    from .probe import interference_experiment, summarize
    from .training import plan_from_config

    try:
        seeds = tuple(int(s) for s in args.seeds.split(","))
    except ValueError as exc:
        raise ConfigError(f"--seeds must be comma-separated integers: {exc}") from exc
    plans = {s: plan_from_config(cfg, s) for s in (1, 2)}
    runs = interference_experiment(model_config(cfg), _dataset(cfg), seeds, _out_dir(cfg) / "probe",
                                   plans, cfg["flow"]["euler_steps"])
    for k, v in summarize(runs).items():
        print(f"{k:<22} {v}")
    return EXIT_OK


def cmd_gradcheck(cfg: dict, args) -> int:
    from .selfcheck import full_model_gradcheck

    t0 = time.time()
    rep = full_model_gradcheck(seed=cfg["train"]["seed"], eps=args.eps, tol=args.tol)
    ok = rep.max_err <= args.tol
    print(f"{'PASS' if ok else 'FAIL'} gradcheck: max err {rep.max_err:.3e} (tol {args.tol:g}) "
          f"in {time.time() - t0:.1f}s")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_selftest(cfg: dict, args) -> int:
    from .selfcheck import blindness_check, equivalence_check, mask_check

    checks = [
        ("blindness", lambda: blindness_check() == 0),
        ("tied equivalence", lambda: equivalence_check() <= 1e-12),
        ("mask layout", mask_check),
    ]
    ok = True
    for name, fn in checks:
        t0 = time.time()
        passed = bool(fn())
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name} ({time.time() - t0:.2f}s)")
    return EXIT_OK if ok else EXIT_FAIL


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "probe": cmd_probe,
            "gradcheck": cmd_gradcheck, "selftest": cmd_selftest}


def main(argv: list[str] | None = None) -> int:
    from .training import PlanError, StageOrderError

    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    overrides, unknown = _split_overrides(extra)
    if unknown:
        parser.print_usage(sys.stderr)
        print(f"motvla: error: unrecognized arguments: {' '.join(unknown)}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, PlanError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageOrderError as exc:
        print(f"stage order error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


__all__ = ["main", "build_parser"]

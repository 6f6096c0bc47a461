"""Three training stages on a small synthetic dataset, then test-split metrics.

    python3 demos/train_and_eval.py [out_dir]
"""
import sys
from pathlib import Path

from motvla import worldgen
from motvla.config import load_config, model_config
from motvla.model import DrivingModel
from motvla.perception import build_instance_banks
from motvla.probe import evaluate
from motvla.training import plan_from_config, run_stage, with_ema
from motvla.vocab import Vocabulary

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_runs")
cfg = load_config(overrides={"data.n_scenes": 64, "train.steps_per_epoch": 4,
                             "model.d": 32, "model.heads": 2, "model.layers": 2})
ds = worldgen.dataset(cfg["data"]["n_scenes"], cfg["data"]["seed"])
mc = model_config(cfg)
train = ds.split("train")
model = DrivingModel(mc, Vocabulary(), seed=0,
                     anchors=build_instance_banks(train, mc.perception.n_det, mc.perception.n_map, 0))
for stage, epochs in ((1, 2), (2, 6), (3, 3)):
    plan = plan_from_config(cfg, stage)
    plan.epochs = epochs
    result = run_stage(plan, train, model, 0, out / f"stage{stage}.csv", out / f"stage{stage}.ckpt")
    last = result.log[-1]
    print(f"stage {stage}:", {k: round(last[k], 4) for k in plan.terms})
with with_ema(result):
    metrics = evaluate(model, ds.split("test"))
for k, v in sorted(metrics.items()):
    print(f"  {k:<15} {v:.4f}")

"""Shared vs separate experts on a small budget: per-layer cosine and forgetting.

    python3 demos/probe_small.py [out_dir]
"""
import sys

from motvla import worldgen
from motvla.model import ModelConfig
from motvla.probe import interference_experiment, summarize
from motvla.training import default_plan

out = sys.argv[1] if len(sys.argv) > 1 else "demo_probe"
ds = worldgen.dataset(48, 0)
plans = {1: default_plan(1, epochs=2, steps_per_epoch=4), 2: default_plan(2, epochs=4, steps_per_epoch=4)}
runs = interference_experiment(ModelConfig(d=32, heads=2, layers=3), ds, (0,), out, plans, euler_steps=4)
for (tag, seed), run in runs.items():
    print(tag, seed, "cos(und, per) by layer:", [round(r.cos_und_per, 3) for r in run["probe"]])
print(summarize(runs))
print(f"CSV and SVG files written to {out}/")

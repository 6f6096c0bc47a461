"""Flow matching on constant-speed straight-road scenes: train, sample, score.

    python3 demos/flow_toy.py
"""
import numpy as np

from motvla.selfcheck import constant_field_error, flow_toy

x1 = np.random.default_rng(0).standard_normal((6, 2))
for n in (1, 10, 100):
    print(f"exact field, {n:3d} Euler steps: max error {constant_field_error(x1, n):.1e}")
for seed in (0, 1, 2):
    r = flow_toy(seed)
    print(f"seed {seed}: sampled x(1) MSE train {r['train_mse']:.4f}  val {r['val_mse']:.4f}")

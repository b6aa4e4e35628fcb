"""
Training on the 8 x 8 grid
==========================

A short comparison of TB and the sub-network loss.  Each run is a pure
function of its configuration, so repeating it reproduces every number.
Pass a step count to change the budget: ``python3 demos/04_training_run.py 20000``.
"""

import sys

from subgfn.env import HyperGrid
from subgfn.losses import LossSpec
from subgfn.trainer import TrainConfig, train_run

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 4000
env = HyperGrid(2, 8)
for kind in ("tb", "subgfn"):
    cfg = TrainConfig(steps=steps, loss=LossSpec(kind), eval_every=max(1, steps // 8), empirical_window=1000)
    _, rows = train_run(env, cfg)
    print(kind)
    for r in rows:
        print(f"  step {r.step:6d}  l1_exact {r.l1_exact:.4f}  l1_empirical {r.l1_empirical:.4f}  "
              f"log Z {r.log_z:.3f}  modes {r.modes_found}")

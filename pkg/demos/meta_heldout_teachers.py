"""Adapting to teachers the federation never saw.

Four teachers train the model; two more are held out. For each held-out
teacher the global model takes five gradient steps on sixteen of its
demonstrations and is scored on its targets. The comparison is between a
meta-trained (first-order MAML) global and a plain FedAvg global.

In this scenario teachers differ only by a constant output offset, and the
two initializations end up adapting about equally well. The meta start is
not reliably better.

    python demos/meta_heldout_teachers.py
"""

import dataclasses

import numpy as np

from fedlfd import config, harness
from fedlfd.scenario import heldout_adaptation_loss

base = config.preset("meta")
meta = base.cross_task.meta
plain = base.replace(cross_task=dataclasses.replace(
    base.cross_task, meta=dataclasses.replace(meta, enabled=False)))
lr = meta.config.inner_lr

print("seed  meta     fedavg")
for seed in range(5):
    row = []
    for cfg in (base, plain):
        world, _ = harness.run(cfg.replace(seed=seed))
        row.append(np.mean([heldout_adaptation_loss(world, t, 1, 5, lr) for t in sorted(world.held_out)]))
    print(f"{seed:4d}  {row[0]:.4f}   {row[1]:.4f}")

"""Federated averaging on a linear problem lands where pooled training would.

Four force-sensing arms each keep their own demonstrations. Only parameter
deltas reach the server, yet after 50 rounds the global model sits within
about 1e-4 of the least-squares fit on everyone's data combined.

    python demos/fedavg_matches_pooled_training.py
"""

import numpy as np

from fedlfd import config, harness
from fedlfd.node import stack

cfg = config.preset("linear")
world, reports = harness.run(cfg)

data = [d for node in world.nodes.values() for buf in node.datasets.values() for d in buf]
X, Y = stack(data)
B, *_ = np.linalg.lstsq(np.hstack([X, np.ones((len(X), 1))]), Y, rcond=None)
pooled = np.concatenate([B[:-1].T.ravel(), B[-1]])

fed = world.aggregators[1].params.values
for r in (0, 4, 9, 24, 49):
    print(f"round {r:2d}: global eval loss {reports[r].global_loss[1]:.6f}")
print(f"pooled samples: {len(X)}")
print(f"|federated - pooled| = {np.linalg.norm(fed - pooled):.2e}")

"""The recycling-plant preset end to end: three task models on six platforms.

Sorting and routing AGVs, dismantling cells and arms share sensing,
manipulation and navigation models. Manipulation and navigation are coupled
by layer alignment and by a learned task-relationship matrix. The run
writes a metrics log and one checkpoint per model into ``out/crm``.

    python demos/recycling_plant.py
"""

from pathlib import Path

import numpy as np

from fedlfd import checkpoint, config, harness

out = Path("out/crm")
world, reports = harness.run(config.preset("crm"), out)

for mid, agg in sorted(world.aggregators.items()):
    spec = world.spec(mid)
    users = [pid for pid, models in sorted(world.eligible.items()) if mid in models]
    print(f"model {mid} ({spec.name}): platforms {users}, "
          f"loss {reports[0].global_loss[mid]:.3f} -> {reports[-1].global_loss[mid]:.3f}")

idle = sorted(set(world.eligible) - set(world.active_platforms))
print(f"idle platforms (no eligible model): {idle or 'none'}")

mt = world.multitask
print("task-relationship matrix inverse for models", list(mt.members))
print(np.array2string(mt.omega_inv, precision=3))

for path in sorted(out.glob("*.flfd")):
    print(path, checkpoint.describe(path))

"""Two groups of teachers who disagree, and why one shared model is not enough.

Teachers 1 and 2 push the arm's output one way, teachers 3 and 4 the
opposite way. A single FedAvg model settles in between and serves nobody
well. With two centers each (node, teacher) pair is routed to the center
that fits its stored demonstrations, and per-teacher losses drop.

    python demos/clustering_opposed_teachers.py [seed]
"""

import sys

from fedlfd import config, harness
from fedlfd.scenario import evaluate

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 3
base = config.preset("two-cluster").replace(seed=seed)

for kind in ("fedavg", "user_clustering"):
    world, _ = harness.run(base.with_settings("strategy", kind=kind))
    per_teacher = evaluate(world)["personalized_loss"][1]
    losses = "  ".join(f"t{t}={v:.3f}" for t, v in sorted(per_teacher.items()))
    print(f"{kind:16s} {losses}")
    clusters = world.aggregators[1].clusters
    if clusters is not None:
        groups: dict[int, list] = {}
        for (node, teacher), c in sorted(clusters.assignment.items()):
            groups.setdefault(c, []).append(f"n{node}/t{teacher}")
        for c, members in sorted(groups.items()):
            print(f"  center {c}: {' '.join(members)}")

"""A careless teacher among careful ones.

Teacher 5 demonstrates with ten times the noise of the others. Plain
averaging trusts every update equally; profile weighting compares each
contributor's profile against the global one and downweights outliers.

    python demos/noisy_teacher.py
"""

from fedlfd import config, harness

base = config.preset("adversarial")
print("seed  fedavg   user_weighting")
for seed in range(5):
    row = []
    for kind in ("fedavg", "user_weighting"):
        _, reports = harness.run(base.replace(seed=seed).with_settings("strategy", kind=kind))
        row.append(reports[-1].global_loss[1])
    print(f"{seed:4d}  {row[0]:.4f}   {row[1]:.4f}")

"""A miniature managed-lane policy sweep through the library API.

Compares the three lane policies at a pair of market-penetration rates on a
shortened horizon, reproducing the shape of the full evaluation at toy scale.
The production-scale grid (26 cells x 5 seeds) is what `cavflow sweep` runs.

Run:  python demos/05_policy_sweep.py    (a few minutes)
"""

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from cavflow import Policy, ScenarioConfig, run_replication, validate_scenario
from cavflow.core import POLICY_MIN_MPR

OUT = Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)

CELLS = [(p, m) for p in Policy for m in (0.5, 0.9) if m >= POLICY_MIN_MPR[p]]
results = {}
for policy, mpr in CELLS:
    cfg = ScenarioConfig(policy=policy, mpr=mpr, warmup_duration=300.0,
                         measured_duration=900.0)
    res = run_replication(validate_scenario(cfg), 7)
    s = res.summary
    results[(policy.value, mpr)] = s
    print(f"{policy.value:5s} {mpr:.0%}: throughput {s['throughput_vph']:6.0f} veh/h  "
          f"delay {s['avg_delay_s']:6.1f} s  speed {s['avg_speed_kmh']:5.1f} km/h  "
          f"latent {s['latent_end']}")

fig, ax = plt.subplots(figsize=(6, 3.6))
for policy in ("NML", "CAV1", "CAV2"):
    xs = [m for (p, m) in results if p == policy]
    ys = [results[(p, m)]["throughput_vph"] for (p, m) in results if p == policy]
    if xs:
        ax.plot([x * 100 for x in xs], ys, "o-", label=policy)
ax.set_xlabel("market penetration rate (%)")
ax.set_ylabel("throughput (veh/h)")
ax.legend()
fig.tight_layout()
fig.savefig(OUT / "policy_sweep.png", dpi=110)
print(f"wrote {OUT / 'policy_sweep.png'}")

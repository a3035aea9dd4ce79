"""DSRC broadcast-reception model.

Evaluates the one-hop reception probability across distance for several
broadcasting-vehicle densities, shows the retry-composite success that gates
the short following gap, and prints where the polynomial fit gets clamped.

Run:  python demos/02_reception_model.py
"""

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from cavflow import (CommParams, load_coefficients, reception_probability,
                     retry_success_probability)

OUT = Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)

coeffs = load_coefficients()
params = CommParams()
print(f"power range {params.phi:.0f} m, broadcast rate {params.f:.0f} Hz, "
      f"{params.attempts} attempts per transmission")

xs = np.linspace(0, params.phi, 301)
fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9.5, 3.6))
for delta in (1.7, 25, 50, 100, 150):
    clamps = {}
    p = reception_probability(xs, delta, params.phi, params.f, coeffs,
                              clamp_counter=clamps)
    ax1.plot(xs, p, lw=1, label=f"{delta:.0f} veh/km")
    print(f"delta={delta:6.1f} veh/km  P(20m)={reception_probability(20, delta, 300, 10, coeffs):.4f}  "
          f"clamped points: high={clamps['p_high']} low={clamps['p_low']}")
ax1.set_xlabel("distance (m)")
ax1.set_ylabel("single-attempt reception probability")
ax1.legend(fontsize=7, title="density")

p1 = np.linspace(0, 1, 200)
for k in (1, 2, 5):
    ax2.plot(p1, retry_success_probability(p1, k), label=f"{k} attempt(s)")
ax2.set_xlabel("single-attempt probability")
ax2.set_ylabel("transmission success probability")
ax2.legend(fontsize=7)

fig.tight_layout()
fig.savefig(OUT / "reception.png", dpi=110)
print(f"wrote {OUT / 'reception.png'}")

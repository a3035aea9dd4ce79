"""Instantaneous fuel-consumption model.

Evaluates the exponential-polynomial fuel rate over the speed/acceleration
plane and compares distributions for a smooth versus a noisy drive cycle.

Run:  python demos/04_fuel_model.py
"""

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from cavflow import fuel_rate, load_vt_micro

OUT = Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)

coeffs = load_vt_micro()
print(f"coefficient units: speed={coeffs.speed_unit} accel={coeffs.accel_unit} "
      f"output={coeffs.output_unit}")
print(f"idle {fuel_rate(0, 0, coeffs):.3f} ml/s, "
      f"cruise@105 {fuel_rate(105 / 3.6, 0, coeffs):.2f} ml/s, "
      f"hard accel@105 {fuel_rate(105 / 3.6, 1.0, coeffs):.2f} ml/s")

v = np.linspace(0, 120 / 3.6, 121)
a = np.linspace(-3, 2, 101)
V, A = np.meshgrid(v, a)
F = fuel_rate(V.ravel(), A.ravel(), coeffs).reshape(V.shape)

fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 3.8))
im = ax1.pcolormesh(V * 3.6, A, np.clip(F, 0, 25), cmap="magma", shading="auto")
fig.colorbar(im, ax=ax1, label="fuel rate (ml/s)")
ax1.set_xlabel("speed (km/h)")
ax1.set_ylabel("acceleration (m/s$^2$)")

# a smooth cruise vs an oscillating one: same mean speed, different burn
rng = np.random.Generator(np.random.PCG64(5))
t = np.arange(0, 600, 0.1)
smooth_v = np.full(t.size, 24.0)
noisy_a = np.clip(np.cumsum(rng.normal(0, 0.05, t.size)), -2, 2)
noisy_v = np.clip(24.0 + np.cumsum(noisy_a) * 0.1 * 0.05, 5, 33)
for name, vv, aa in (("smooth", smooth_v, np.zeros(t.size)),
                     ("oscillating", noisy_v, noisy_a)):
    f = fuel_rate(vv, aa, coeffs)
    ax2.hist(f, bins=60, range=(0, 15), histtype="step", density=True, label=f"{name}: "
             f"mean {f.mean():.2f} ml/s")
ax2.set_xlabel("fuel rate (ml/s)")
ax2.set_ylabel("density")
ax2.legend(fontsize=8)
fig.tight_layout()
fig.savefig(OUT / "fuel_model.png", dpi=110)
print(f"wrote {OUT / 'fuel_model.png'}")

"""Car-following building blocks.

Walks through the CAV controller: the desired-gap law, the plain IDM
response, the constant-acceleration heuristic that damps its overreaction,
and the coolness-blended output.  Ends with a platoon relaxing to its
stationary spacing behind a slow leader.

Run:  python demos/01_car_following.py   (writes demos/out/car_following.png)
"""

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from cavflow import EidmParams, LeaderView, cah_accel, desired_gap, eidm_accel, idm_accel

OUT = Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)

p = EidmParams()
print(f"controller: T_intra={p.t_intra}s T_inter={p.t_inter}s s0={p.s0}m "
      f"a={p.a_max} b={p.b_comf} c={p.c_cool} v_des={p.v_des * 3.6:.0f} km/h")

# desired gap vs speed, both time-gap modes
v = np.linspace(0, 33, 100)
fig, axes = plt.subplots(1, 3, figsize=(13, 3.6))
for T, label in ((p.t_intra, "behind CAV, link up (0.6 s)"),
                 (p.t_inter, "link down / behind HV (1.2 s)")):
    axes[0].plot(v * 3.6, desired_gap(v, v, T, p), label=label)
axes[0].set_xlabel("speed (km/h)")
axes[0].set_ylabel("desired gap (m)")
axes[0].legend(fontsize=7)

# IDM vs blended response approaching a slower leader: the heuristic keeps
# the response calm where the plain IDM panics (e.g. after a cut-in)
gap = np.linspace(2, 80, 200)
v_self, v_lead = 25.0, 20.0
idm = np.array([idm_accel(v_self, LeaderView(True, g, v_lead, 0.0), 0.6, p) for g in gap])
eidm = np.array([eidm_accel(v_self, LeaderView(True, g, v_lead, 0.0), 0.6, p, accel=0.0)
                 for g in gap])
cah = np.array([cah_accel(v_self, LeaderView(True, g, v_lead, 0.0), p, accel=0.0)
                for g in gap])
axes[1].plot(gap, idm, label="IDM")
axes[1].plot(gap, cah, label="CAH")
axes[1].plot(gap, eidm, label="blended", lw=2)
axes[1].set_ylim(-10, 3)
axes[1].set_xlabel("gap (m)  [25 m/s closing on 20 m/s]")
axes[1].set_ylabel("acceleration (m/s$^2$)")
axes[1].legend(fontsize=7)

# platoon relaxation: ten vehicles behind a leader pinned at 8 m/s converge
# to the stationary gap; at this speed it is s0 + v*T to within half a percent
n, L, v_lead, dt = 10, 4.5, 8.0, 0.1
pos = np.arange(n, 0, -1) * 60.0
vel = np.full(n, v_lead)
prev = np.zeros(n)
history = []
for step in range(12000):
    acc = np.zeros(n)
    for i in range(1, n):
        acc[i] = eidm_accel(vel[i], LeaderView(True, pos[i - 1] - L - pos[i],
                                               vel[i - 1], prev[i - 1]),
                            p.t_intra, p, accel=prev[i])
    vel_new = np.maximum(vel + acc * dt, 0)
    pos += vel * dt + 0.5 * acc * dt * dt
    vel = vel_new
    vel[0] = v_lead
    prev = acc
    if step % 50 == 0:
        history.append(pos[:-1] - L - pos[1:])
hist = np.array(history)
for i in range(n - 1):
    axes[2].plot(np.arange(hist.shape[0]) * 5.0, hist[:, i], lw=0.8)
axes[2].axhline(p.s0 + v_lead * p.t_intra, color="k", ls="--",
                label=f"s0 + vT = {p.s0 + v_lead * p.t_intra:.1f} m")
axes[2].set_xlabel("time (s)")
axes[2].set_ylabel("gap (m)")
axes[2].legend(fontsize=7)

fig.tight_layout()
fig.savefig(OUT / "car_following.png", dpi=110)
print(f"final platoon gaps: {hist[-1].round(3).tolist()}")
print(f"wrote {OUT / 'car_following.png'}")

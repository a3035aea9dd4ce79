"""Car-following acceleration laws.

CAVs run the enhanced IDM: the collision-free IDM blended with the
constant-acceleration heuristic (CAH) through a coolness factor, so that a
braking overreaction of the plain IDM after cut-ins or at short gaps is damped
(Kesting, Treiber & Helbing 2010).  HVs run a stand-in stochastic model: the
IDM core at a 1.4 s desired time gap plus bounded Ornstein-Uhlenbeck
acceleration noise and a per-driver desired-speed draw.

Every function here is pure and accepts scalars or same-shaped numpy arrays
(the engine evaluates whole lanes at once); scalar inputs return floats.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import KMH, VehicleClass

EMERGENCY_DECEL = 9.0   # m/s^2 floor; tire-limit bound, prevents numerical blow-ups
T_HV = 1.4              # s, human desired time gap

_INF = float("inf")


@dataclass(frozen=True)
class EidmParams:
    """CAV controller parameters (defaults: standard E-IDM calibration)."""

    t_intra: float = 0.6          # s, gap behind a communicating CAV
    t_inter: float = 1.2          # s, gap behind anything else
    s0: float = 1.0               # m, standstill clearance
    a_max: float = 2.0            # m/s^2
    b_comf: float = 2.0           # m/s^2, comfortable deceleration
    c_cool: float = 0.99          # coolness factor, weight of the CAH term
    delta: float = 4.0            # free-acceleration exponent
    v_des: float = 105.0 * KMH    # m/s

    def check(self) -> None:
        if not (self.a_max > 0 and self.b_comf > 0 and self.s0 > 0):
            raise ValueError("a_max, b_comf, s0 must be > 0")
        if not 0.0 <= self.c_cool <= 1.0:
            raise ValueError("c_cool must be in [0, 1]")
        if not self.t_intra < self.t_inter:
            raise ValueError("t_intra must be < t_inter")


@dataclass(frozen=True)
class HvParams:
    """Stochastic human-driver stand-in parameters.

    desired_time_gap is fixed at 1.4 s; the rest are artifact defaults chosen
    so a fully human network congests under a 10,000 veh/h load.
    """

    desired_time_gap: float = T_HV
    s0: float = 2.5               # m
    a_max: float = 1.2            # m/s^2
    b_comf: float = 2.0           # m/s^2
    delta: float = 4.0
    v_des_mean: float = 120.0 * KMH   # per-driver draw centered on the speed limit
    v_des_std: float = 6.0 * KMH
    v_des_min: float = 100.0 * KMH
    v_des_max: float = 135.0 * KMH
    noise_sigma: float = 0.35     # m/s^2, stationary std of the OU acceleration noise
    noise_tau: float = 6.0        # s, OU correlation time
    noise_bound: float = 1.2      # m/s^2, hard clip
    reaction_delay: float = 0.0   # s, optional delayed leader view (<= 1.0)

    def check(self) -> None:
        if self.noise_sigma < 0 or self.noise_tau <= 0 or self.noise_bound < 0:
            raise ValueError("noise magnitude >= 0 and correlation time > 0 required")
        if not 0.0 <= self.reaction_delay <= 1.0:
            raise ValueError("reaction_delay must be in [0, 1] s")


@dataclass
class LeaderView:
    """What a follower knows about its leader. Scalar or array fields.

    gap is bumper-to-bumper and must be > 0 wherever exists is True; leader
    fields are ignored wherever exists is False.
    """

    exists: object = False
    gap: object = _INF
    leader_speed: object = 0.0
    leader_accel: object = 0.0
    leader_class: object = VehicleClass.HV

    @staticmethod
    def none() -> "LeaderView":
        return LeaderView(False, _INF, 0.0, 0.0, VehicleClass.HV)


def _ret(x):
    x = np.asarray(x, dtype=float)
    return float(x) if x.ndim == 0 else x


def desired_gap(v, v_lead, T, p: EidmParams | HvParams):
    """Equilibrium-plus-approach desired gap s* = s0 + max(0, v*T + v*dv/(2*sqrt(a*b))).

    The dynamical part is floored at zero (standard IDM convention) so a fast
    leader cannot drive the desired gap below the standstill clearance.
    """
    v = np.asarray(v, dtype=float)
    dyn = v * T + v * (v - v_lead) / (2.0 * np.sqrt(p.a_max * p.b_comf))
    return _ret(p.s0 + np.maximum(0.0, dyn))


def _idm_core(v, gap, v_lead, T, p):
    """IDM acceleration a*[1 - (v/v_des)^delta - (s*/gap)^2]; gap may be inf (free flow)."""
    v = np.asarray(v, dtype=float)
    gap = np.asarray(gap, dtype=float)
    sstar = desired_gap(v, v_lead, T, p)
    vdes = getattr(p, "v_des", None)
    if vdes is None:  # per-vehicle desired speeds are passed through HvParams dynamically
        raise AttributeError("params must define v_des")
    with np.errstate(divide="ignore"):
        ratio = np.where(gap > 0, sstar / gap, _INF)
    return p.a_max * (1.0 - (v / vdes) ** p.delta - ratio * ratio)


def idm_accel(v, leader: LeaderView, T, p: EidmParams):
    """Plain IDM acceleration; only the free-flow term when there is no leader."""
    gap = np.where(np.asarray(leader.exists, dtype=bool), leader.gap, _INF)
    return _ret(_idm_core(v, gap, leader.leader_speed, T, p))


def cah_accel(v, leader: LeaderView, p: EidmParams, accel=0.0):
    """Constant-acceleration heuristic: the acceleration that avoids a crash if
    both vehicles kept constant acceleration, with no overreaction to gaps.

    ``accel`` is the subject's current acceleration; the effective leader
    acceleration is min(leader_accel, accel).  The Heaviside term uses
    theta(0) = 0 (irrelevant when dv = 0 since the (dv)^2 factor vanishes).
    """
    v = np.asarray(v, dtype=float)
    gap = np.asarray(leader.gap, dtype=float)
    vl = np.asarray(leader.leader_speed, dtype=float)
    a_eff = np.minimum(np.asarray(leader.leader_accel, dtype=float), np.asarray(accel, dtype=float))
    dv = v - vl
    first_cond = vl * dv <= -2.0 * gap * a_eff
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = vl * vl - 2.0 * gap * a_eff
        # denom = 0 only with vl = 0, a_eff = 0 (stopped, non-braking leader);
        # the a_eff -> 0 limit of the branch is the brake-to-stop value -v^2/(2*gap)
        first = np.where(
            denom != 0.0,
            v * v * a_eff / np.where(denom != 0.0, denom, 1.0),
            -v * v / (2.0 * gap),
        )
        theta = (dv > 0.0).astype(float)
        second = a_eff - dv * dv * theta / (2.0 * gap)
    return _ret(np.where(first_cond, first, second))


def eidm_accel(v, leader: LeaderView, T, p: EidmParams, accel=0.0):
    """E-IDM: IDM when it is not more braking than the CAH, otherwise the
    coolness-weighted blend (1-c)*idm + c*[cah + b*tanh((idm - cah)/b)].

    Output is floored at the emergency deceleration.  Without a leader only
    the free-flow term remains.
    """
    exists = np.asarray(leader.exists, dtype=bool)
    gap = np.where(exists, leader.gap, _INF)
    a_idm = _idm_core(v, gap, leader.leader_speed, T, p)
    # CAH evaluated only where a leader exists; elsewhere the IDM branch wins
    safe_gap = np.where(exists, gap, 1.0)
    lv = LeaderView(True, safe_gap, leader.leader_speed, leader.leader_accel)
    a_cah = np.asarray(cah_accel(v, lv, p, accel), dtype=float)
    blended = (1.0 - p.c_cool) * a_idm + p.c_cool * (
        a_cah + p.b_comf * np.tanh((a_idm - a_cah) / p.b_comf)
    )
    out = np.where(~exists | (a_idm >= a_cah), a_idm, blended)
    return _ret(np.maximum(out, -EMERGENCY_DECEL))


def ou_noise_step(state, dt, p: HvParams, rng) -> np.ndarray:
    """Advance the bounded OU acceleration-noise state by dt.

    Exact discretization: x' = x*exp(-dt/tau) + sigma*sqrt(1-exp(-2dt/tau))*N(0,1),
    clipped to +-noise_bound.  Deterministic given the rng state.
    """
    state = np.asarray(state, dtype=float)
    if p.noise_sigma == 0.0:
        return np.zeros_like(state)
    decay = np.exp(-dt / p.noise_tau)
    scale = p.noise_sigma * np.sqrt(1.0 - decay * decay)
    fresh = rng.standard_normal(state.shape if state.ndim else None)
    return np.clip(state * decay + scale * fresh, -p.noise_bound, p.noise_bound)


def hv_accel(v, leader: LeaderView, p: HvParams, noise=0.0, v_des=None):
    """Human stand-in: IDM core at the 1.4 s gap plus the current noise value.

    With noise = 0 this is exactly the IDM with T = 1.4 s.  ``v_des`` overrides
    the per-call desired speed (the engine passes each driver's own draw).
    """
    vdes = p.v_des_mean if v_des is None else v_des

    class _P:  # lightweight param view with the per-driver desired speed
        a_max = p.a_max
        b_comf = p.b_comf
        s0 = p.s0
        delta = p.delta
        v_des = vdes

    gap = np.where(np.asarray(leader.exists, dtype=bool), leader.gap, _INF)
    out = _idm_core(v, gap, leader.leader_speed, p.desired_time_gap, _P) + noise
    return _ret(np.clip(out, -EMERGENCY_DECEL, p.a_max + p.noise_bound))


def select_dtg(subject_class, leader: LeaderView, comm_ok, p: EidmParams | None = None,
               hv: HvParams | None = None):
    """Desired time gap in force for the step.

    HV: always 1.4 s.  CAV: the short intra-platoon gap only behind a CAV whose
    broadcast was received; behind an HV, behind a CAV with failed reception,
    or with no leader, the long inter-platoon gap (unused by the free-flow term
    in the no-leader case).
    """
    p = p if p is not None else EidmParams()
    hv = hv if hv is not None else HvParams()
    subject_class = np.asarray(subject_class)
    is_cav = subject_class == VehicleClass.CAV
    lead_cav = np.asarray(leader.exists, dtype=bool) & (
        np.asarray(leader.leader_class) == VehicleClass.CAV
    )
    short = lead_cav & np.asarray(comm_ok, dtype=bool)
    out = np.where(is_cav, np.where(short, p.t_intra, p.t_inter), hv.desired_time_gap)
    return _ret(out)

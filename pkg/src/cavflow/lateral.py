"""Lane eligibility under managed-lane policies, discretionary lane changing,
and mandatory merging at ramps.

Eligibility follows the managed-lane plan: NML opens every lane to both
classes, CAV1 dedicates the leftmost lane (4) to CAVs, CAV2 dedicates the two
leftmost (3 and 4).  HVs never use a dedicated lane, even when it is empty.

Discretionary changes use a MOBIL incentive/safety rule (politeness-weighted
acceleration gains, Kesting, Treiber & Helbing 2007) with the deterministic
IDM core as the evaluation model; execution is an instantaneous lane
reassignment followed by a cooldown.  Mandatory moves (acceleration-lane
merges and off-ramp approaches) use gap acceptance whose deceleration bound
relaxes linearly as the remaining distance shrinks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Policy, VehicleClass
from .longitudinal import HvParams, LeaderView, T_HV, idm_accel


@dataclass(frozen=True)
class LanePolicy:
    """Per-lane allowed classes for one policy tag."""

    policy: Policy

    #: leftmost lanes reserved for CAVs, by policy
    _RESERVED = {Policy.NML: 0, Policy.CAV1: 1, Policy.CAV2: 2}

    def reserved_lanes(self, lane_count: int = 4) -> tuple[int, ...]:
        n = self._RESERVED[self.policy]
        return tuple(range(lane_count - n + 1, lane_count + 1))

    def allows(self, vehicle_class: VehicleClass, lane: int, lane_count: int = 4) -> bool:
        if not 1 <= lane <= lane_count:
            raise ValueError(f"lane {lane} out of range 1..{lane_count}")
        if vehicle_class == VehicleClass.CAV:
            return True
        return lane not in self.reserved_lanes(lane_count)


def lane_eligible(policy: Policy | LanePolicy, vehicle_class: VehicleClass, lane: int,
                  lane_count: int = 4) -> bool:
    """Membership test against the managed-lane plan; raises on lane out of range."""
    lp = policy if isinstance(policy, LanePolicy) else LanePolicy(policy)
    return lp.allows(vehicle_class, lane, lane_count)


@dataclass(frozen=True)
class LaneChangeParams:
    politeness: float = 0.3           # weight of neighbors' gains
    advantage_threshold: float = 0.1  # m/s^2 net gain required
    b_safe: float = 4.0               # m/s^2 deceleration bound for discretionary moves
    b_safe_max: float = 7.0           # m/s^2 fully-relaxed bound for urgent mandatory moves
    min_physical_gap: float = 0.3     # m clearance each way at insertion
    cooldown: float = 3.0             # s between discretionary changes
    offramp_prepare_distance: float = 500.0  # m before the exit to start seeking lane 1
    # asymmetric MOBIL bias pulling eligible CAVs into (and keeping them on)
    # dedicated lanes; dedicated lanes exist to be used preferentially
    managed_bias: float = 0.4         # m/s^2
    # keep-lane hysteresis subtracted from every discretionary gain; damps
    # ping-pong between near-equivalent lanes without touching the threshold
    keep_lane_bias: float = 0.25      # m/s^2
    # extra penalty for voluntarily leaving a dedicated lane; paired with the
    # 0.85-speed entry guard it forms the dead band that stops entry/exit
    # limit cycles at the managed-lane boundary
    managed_exit_penalty: float = 1.6  # m/s^2
    # dedicated-lane preference: an eligible CAV joins the adjacent reserved
    # lane whenever insertion is safe and the lane still moves at this fraction
    # of the vehicle's own speed (the lane fills until it degrades past it)
    managed_speed_ratio: float = 0.85

    def check(self) -> None:
        if not 0.0 <= self.politeness <= 1.0:
            raise ValueError("politeness must be in [0, 1]")
        if self.cooldown < 0:
            raise ValueError("cooldown must be >= 0")
        if self.b_safe <= 0 or self.b_safe_max < self.b_safe:
            raise ValueError("need 0 < b_safe <= b_safe_max")

    def relaxed_bound(self, remaining: float, total: float) -> float:
        """Deceleration bound for a mandatory move with ``remaining`` of ``total`` m left."""
        if total <= 0:
            return self.b_safe_max
        u = min(max(1.0 - remaining / total, 0.0), 1.0)
        return self.b_safe + (self.b_safe_max - self.b_safe) * u


@dataclass(frozen=True)
class NeighborView:
    """Lead/lag context of one prospective slot in a target lane.

    Gaps are bumper-to-bumper relative to the subject; ``*_speed`` and the
    followers' current accelerations feed the incentive terms.
    """

    lead_exists: bool = False
    lead_gap: float = float("inf")
    lead_speed: float = 0.0
    lead_class: VehicleClass = VehicleClass.HV
    lag_exists: bool = False
    lag_gap: float = float("inf")
    lag_speed: float = 0.0
    lag_time_gap: float = T_HV        # desired time gap the lag vehicle would use
    lag_params: object = None         # EidmParams or HvParams of the lag vehicle
    lag_vdes: float | None = None
    lag_accel_now: float = 0.0


def kinematic_gap_ok(gap, v_rear, v_front, floor: float = 0.5) -> bool:
    """Emergency-feasibility envelope: a closing rear vehicle must be able to
    kill the approach inside the gap below the emergency deceleration."""
    dv = max(v_rear - v_front, 0.0)
    return gap > dv * dv / 16.0 + floor


def _idm_for(v, gap, v_lead, T, params, vdes=None):
    """Deterministic IDM evaluation used for all hypothetical accelerations."""
    if isinstance(params, HvParams):
        class _P:
            a_max = params.a_max
            b_comf = params.b_comf
            s0 = params.s0
            delta = params.delta
            v_des = vdes if vdes is not None else params.v_des_mean
        return idm_accel(v, LeaderView(np.isfinite(gap), max(gap, 1e-9), v_lead, 0.0), T, _P)
    p = params
    if vdes is not None and vdes != p.v_des:
        from dataclasses import replace
        p = replace(p, v_des=vdes)
    return idm_accel(v, LeaderView(np.isfinite(gap), max(gap, 1e-9), v_lead, 0.0), T, p)


def discretionary_lane_change(v, vdes, subject_class, T_self, params_self,
                              accel_now, lead_gap, lead_speed,
                              old_lag: NeighborView, left: NeighborView | None,
                              right: NeighborView | None, lc: LaneChangeParams,
                              in_cooldown: bool = False) -> int:
    """MOBIL decision from one frozen-snapshot neighborhood.

    Returns -1 (right), 0 (stay) or +1 (left).  ``left``/``right`` are None
    when that side is ineligible or absent.  The caller supplies the subject's
    current acceleration and its view in the current lane; ``old_lag``
    describes the vehicle it would release.
    """
    if in_cooldown:
        return 0

    def gain(side: NeighborView | None) -> float | None:
        if side is None:
            return None
        if side.lead_exists and (side.lead_gap < lc.min_physical_gap or
                                 not kinematic_gap_ok(side.lead_gap, v, side.lead_speed)):
            return None
        if side.lag_exists and (side.lag_gap < lc.min_physical_gap or
                                not kinematic_gap_ok(side.lag_gap, side.lag_speed, v)):
            return None
        # prospective CAV leaders use the long gap: no link established yet
        T_new = T_self
        a_self_new = _idm_for(v, side.lead_gap if side.lead_exists else float("inf"),
                              side.lead_speed, T_new, params_self, vdes)
        if a_self_new < -lc.b_safe:
            return None
        d_fol = 0.0
        if side.lag_exists:
            a_lag_new = _idm_for(side.lag_speed, side.lag_gap, v, side.lag_time_gap,
                                 side.lag_params, side.lag_vdes)
            if a_lag_new < -lc.b_safe:
                return None
            d_fol = a_lag_new - side.lag_accel_now
        d_old = 0.0
        if old_lag.lag_exists:
            released_gap = old_lag.lag_gap + (lead_gap if np.isfinite(lead_gap) else 1e9)
            a_old_new = _idm_for(old_lag.lag_speed, released_gap, lead_speed,
                                 old_lag.lag_time_gap, old_lag.lag_params, old_lag.lag_vdes)
            d_old = a_old_new - old_lag.lag_accel_now
        return (a_self_new - accel_now) + lc.politeness * (d_fol + d_old)

    g_left = gain(left)
    g_right = gain(right)
    best, direction = -np.inf, 0
    if g_left is not None and g_left > lc.advantage_threshold and g_left > best:
        best, direction = g_left, 1
    if g_right is not None and g_right > lc.advantage_threshold and g_right > best:
        best, direction = g_right, -1
    return direction


def mandatory_merge(v, T_self, params_self, vdes, target: NeighborView,
                    remaining: float, total: float, lc: LaneChangeParams) -> bool:
    """Gap acceptance for a forced move (ramp merge or off-ramp approach).

    Accept when both the subject's and the target follower's induced
    deceleration stay within the linearly-relaxed bound and physical clearance
    holds; the caller decelerates toward the lane end while this returns False.
    """
    bound = lc.relaxed_bound(remaining, total)
    if target.lead_exists and (target.lead_gap < lc.min_physical_gap or
                               not kinematic_gap_ok(target.lead_gap, v, target.lead_speed)):
        return False
    if target.lag_exists and (target.lag_gap < lc.min_physical_gap or
                              not kinematic_gap_ok(target.lag_gap, target.lag_speed, v)):
        return False
    a_self = _idm_for(v, target.lead_gap if target.lead_exists else float("inf"),
                      target.lead_speed, T_self, params_self, vdes)
    if a_self < -bound:
        return False
    if target.lag_exists:
        a_lag = _idm_for(target.lag_speed, target.lag_gap, v, target.lag_time_gap,
                         target.lag_params, target.lag_vdes)
        if a_lag < -bound:
            return False
    return True

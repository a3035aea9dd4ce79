"""Discrete-time simulation loop.

One replication advances a struct-of-arrays world at 10 Hz through a fixed
phase order: 2-Hz communication refresh, car-following control from the frozen
snapshot, lane-change decisions with a deterministic serial commit (upstream
position wins conflicts), ballistic kinematics with a stop clamp, detector
capture, then exits and Poisson arrivals.  Everything is driven by three
independent seeded streams (spawn, HV noise, communication), so a replication
is a pure function of (scenario, seed) and reruns are bit-identical.

Per-lane position order is maintained incrementally (car following cannot
reorder a lane; only spawns, exits and lane changes splice the order array),
which keeps the hot path free of per-step sorts.  Any overlap, ordering break
or non-finite state aborts the run with diagnostics.
"""

from __future__ import annotations

import hashlib
import json
import time as _time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .comm import CommCoefficients, CommParams, load_coefficients
from .core import SIM_STEP, Scenario, VehicleClass, VehicleState
from .lateral import LaneChangeParams, LanePolicy
from .longitudinal import EMERGENCY_DECEL, EidmParams, HvParams

DT = SIM_STEP
KPI_BIN = 300.0  # 5-min aggregation interval

HV = int(VehicleClass.HV)
CAV = int(VehicleClass.CAV)


class IntegrityError(RuntimeError):
    """A physical invariant (overlap, ordering, finiteness) failed mid-run."""


@dataclass
class ModelParams:
    """Controller, channel and lane-change parameter bundle for one run."""

    eidm: EidmParams = field(default_factory=EidmParams)
    hv: HvParams = field(default_factory=HvParams)
    comm: CommParams = field(default_factory=CommParams)
    lane_change: LaneChangeParams = field(default_factory=LaneChangeParams)

    def check(self) -> None:
        self.eidm.check()
        self.hv.check()
        self.comm.check()
        self.lane_change.check()


@dataclass
class RunResults:
    """In-memory raw outputs of one replication (measured window only)."""

    scenario: Scenario
    seed: int
    detectors: dict[str, np.ndarray]
    vehicles: dict[str, np.ndarray]
    comm: dict[str, np.ndarray]
    kpi: dict[str, np.ndarray]
    summary: dict

    def to_csv(self, outdir) -> dict[str, str]:
        return write_run(self, outdir)


def _grow(arr: np.ndarray, new_cap: int) -> np.ndarray:
    out = np.zeros(new_cap, dtype=arr.dtype)
    out[: arr.size] = arr
    return out


class World:
    """Mutable simulation state for one replication."""

    def __init__(self, scenario: Scenario, seed: int, params: ModelParams | None = None,
                 coeffs: CommCoefficients | None = None, capacity: int = 4096):
        self.scn = scenario
        self.cfg = scenario.cfg
        self.net = scenario.net
        self.demand = scenario.demand
        self.params = params if params is not None else ModelParams()
        self.params.check()
        self.coeffs = coeffs if coeffs is not None else load_coefficients()
        self.seed = int(seed)

        ss = np.random.SeedSequence(self.seed)
        s_spawn, s_noise, s_comm = ss.spawn(3)
        self.rng_spawn = np.random.Generator(np.random.PCG64(s_spawn))
        self.rng_noise = np.random.Generator(np.random.PCG64(s_noise))
        self.rng_comm = np.random.Generator(np.random.PCG64(s_comm))

        net = self.net
        self.L = net.lane_count                      # mainline lane codes 0..L-1
        self.R = len(net.interchanges)               # accel-lane codes L..L+R-1
        self.n_codes = self.L + self.R
        self.off_pos = np.array([ic.offramp_position for ic in net.interchanges])
        self._off_by_dest = self.off_pos if self.off_pos.size else np.array([np.inf])
        self.merge_start = np.array([ic.merge_start for ic in net.interchanges])
        self.merge_end = np.array([ic.merge_end for ic in net.interchanges])
        self.accel_len = np.array([ic.accel_lane_length for ic in net.interchanges])
        self.dest_end = self.R                       # destination id for the mainline end

        lp = LanePolicy(self.cfg.policy)
        reserved = lp.reserved_lanes(self.L)
        self.hv_codes = np.array([c for c in range(self.L) if (c + 1) not in reserved], dtype=np.int64)
        self.cav_codes = np.arange(self.L, dtype=np.int64)
        self.reserved_codes = np.array([l - 1 for l in reserved], dtype=np.int64)
        self.first_reserved = int(self.reserved_codes.min()) if self.reserved_codes.size else 10**6
        if self.hv_codes.size == 0 and self.cfg.mpr < 1.0:
            raise ValueError("policy reserves every lane but demand includes HVs")

        # slot arrays
        cap = capacity
        self.cap = cap
        self.pos = np.zeros(cap)
        self.v = np.zeros(cap)
        self.a = np.zeros(cap)
        self.length = np.zeros(cap)
        self.vdes = np.zeros(cap)
        self.s0 = np.zeros(cap)
        self.amax = np.zeros(cap)
        self.bcomf = np.zeros(cap)
        self.noise = np.zeros(cap)
        self.dist = np.zeros(cap)
        self.entry_t = np.zeros(cap)
        self.lc_until = np.zeros(cap)
        self.dtg = np.zeros(cap)
        self.lanecode = np.zeros(cap, dtype=np.int16)
        self.cls = np.zeros(cap, dtype=np.int8)
        self.origin = np.zeros(cap, dtype=np.int8)
        self.destid = np.zeros(cap, dtype=np.int8)
        self.vid = np.zeros(cap, dtype=np.int64)
        self.comm_ok = np.zeros(cap, dtype=bool)

        self.order = np.empty(0, dtype=np.int64)     # alive slots, grouped by lanecode, pos asc
        self.counts = np.zeros(self.n_codes, dtype=np.int64)
        self.free: list[int] = list(range(cap - 1, -1, -1))
        self._starts_cache: np.ndarray | None = None
        self.sqab2 = np.zeros(cap)                   # per-slot 2*sqrt(a_max*b_comf)

        # demand bookkeeping
        rates = [self.demand.mainline_vph] + list(self.demand.ramp_vph)
        self.rate_per_step = np.array(rates) / 3600.0 * DT
        self.queues: list[list[tuple]] = [[] for _ in range(1 + self.R)]
        self.next_vid = 0
        self.n_generated = 0
        self.n_entered = 0
        self.n_exited = 0

        self.step_index = 0
        self.warmup = self.cfg.warmup_duration
        self.t_end = self.cfg.warmup_duration + self.cfg.measured_duration
        self.total_steps = int(round(self.t_end / DT))
        self.comm_every = int(round(self.cfg.comm_update_interval / DT))

        # detector state
        self.det_pos = np.asarray(net.detector_positions, dtype=float)
        self.det_last_t = np.full((self.det_pos.size, self.L), np.nan)
        self._det_rows: list[tuple] = []
        self._veh_rows: list[tuple] = []
        self._comm_rows: list[tuple] = []

        # 5-min KPI accumulators
        self.n_bins = max(1, int(np.ceil(self.cfg.measured_duration / KPI_BIN)))
        self.kpi_vdx = np.zeros(self.n_bins)
        self.kpi_dx = np.zeros(self.n_bins)
        self.kpi_exits = np.zeros(self.n_bins, dtype=np.int64)
        self.kpi_entered = np.zeros(self.n_bins, dtype=np.int64)
        self._bin_delay_rows: list[tuple] = []
        self._last_bin_seen = -1
        self.delay_exited_sum = 0.0
        self.n_exited_measured = 0
        self.dist_exited_measured = 0.0
        self.time_exited_measured = 0.0

        self.stats = {
            "min_gap": float("inf"), "wall_clamps": 0, "missed_exits": 0,
            "xi_clamps": 0, "p_low_clamps": 0, "p_high_clamps": 0,
            "ineligible_occupancy": 0, "lane_changes": 0, "mandatory_merges": 0,
        }

        d = self.params.hv.reaction_delay
        self.delay_steps = int(round(d / DT))
        if self.delay_steps > 0:
            self._ring_gap = np.full((cap, self.delay_steps), np.inf)
            self._ring_lv = np.zeros((cap, self.delay_steps))
            self._ring_la = np.zeros((cap, self.delay_steps))

    # -- slot/order plumbing ------------------------------------------------

    def _grow_all(self) -> None:
        new_cap = self.cap * 2
        for name in ("pos", "v", "a", "length", "vdes", "s0", "amax", "bcomf", "noise",
                     "dist", "entry_t", "lc_until", "dtg", "lanecode", "cls", "origin",
                     "destid", "vid", "comm_ok", "sqab2"):
            setattr(self, name, _grow(getattr(self, name), new_cap))
        if self.delay_steps > 0:
            for name in ("_ring_gap", "_ring_lv", "_ring_la"):
                old = getattr(self, name)
                new = np.full((new_cap, self.delay_steps), np.inf if name == "_ring_gap" else 0.0)
                new[: self.cap] = old
                setattr(self, name, new)
        self.free.extend(range(new_cap - 1, self.cap - 1, -1))
        self.cap = new_cap

    def _starts(self) -> np.ndarray:
        if self._starts_cache is None:
            self._starts_cache = np.concatenate(([0], np.cumsum(self.counts)))
        return self._starts_cache

    def _oidx(self, slot: int) -> int:
        """Ordered index of an alive slot (binary search by position in its lane)."""
        c = self.lanecode[slot]
        s = self._starts()
        seg = self.order[s[c]: s[c + 1]]
        j = int(np.searchsorted(self.pos[seg], self.pos[slot]))
        # positions are unique within a lane; scan the tie neighborhood defensively
        while j < seg.size and seg[j] != slot:
            j += 1
        if j >= seg.size:
            raise IntegrityError(f"slot {slot} missing from its lane segment")
        return int(s[c] + j)

    def _order_insert(self, slot: int, code: int) -> None:
        s = self._starts()
        seg = self.order[s[code]: s[code + 1]]
        j = int(self.pos[seg].searchsorted(self.pos[slot])) + int(s[code])
        self.order = np.concatenate((self.order[:j], [slot], self.order[j:]))
        self.counts[code] += 1
        self._starts_cache = None

    def _order_remove(self, slot: int) -> None:
        i = self._oidx(slot)
        self.order = np.concatenate((self.order[:i], self.order[i + 1:]))
        self.counts[self.lanecode[slot]] -= 1
        self._starts_cache = None

    def vehicle_state(self, slot: int) -> VehicleState:
        """Scalar view of one slot (test/introspection convenience)."""
        code = int(self.lanecode[slot])
        lane = code + 1 if code < self.L else 100 + (code - self.L)
        return VehicleState(
            id=int(self.vid[slot]), vehicle_class=VehicleClass(int(self.cls[slot])),
            lane=lane, position=float(self.pos[slot]), speed=float(self.v[slot]),
            accel=float(self.a[slot]), length=float(self.length[slot]),
            dtg_active=float(self.dtg[slot]) if self.dtg[slot] else
            (1.4 if self.cls[slot] == HV else 1.2),
            origin=int(self.origin[slot]), destination=int(self.destid[slot]),
            entry_time=float(self.entry_t[slot]), desired_speed=float(self.vdes[slot]),
        )

    # -- spawning -----------------------------------------------------------

    def _draw_arrival(self, origin: int) -> tuple:
        rng = self.rng_spawn
        is_cav = bool(rng.random() < self.demand.mpr)
        u = rng.random()
        fr = self.demand.offramp_fraction
        # routing: mainline may leave at any downstream ramp; ramp k at ramps > k
        dest = self.dest_end
        k0 = 0 if origin == 0 else origin  # first off-ramp strictly downstream of origin
        for k in range(k0, self.R):
            lo = (k - k0) * fr
            if lo <= u < lo + fr and (origin == 0 or k > origin - 1):
                dest = k
                break
        if is_cav:
            vdes = self.params.eidm.v_des
        else:
            hvp = self.params.hv
            vdes = float(np.clip(rng.normal(hvp.v_des_mean, hvp.v_des_std),
                                 hvp.v_des_min, hvp.v_des_max))
        if origin == 0:
            codes = self.cav_codes if is_cav else self.hv_codes
            if dest == 0 and self.R:
                # first-off-ramp trips pre-position on the right (short approach)
                codes = codes[codes <= 1] if np.any(codes <= 1) else codes
            code = int(codes[rng.integers(0, codes.size)])
        else:
            code = self.L + origin - 1
        vid = self.next_vid
        self.next_vid += 1
        self.n_generated += 1
        return (vid, is_cav, dest, vdes, code, origin)

    def _try_insert(self, pend: tuple, t: float) -> bool:
        vid, is_cav, dest, vdes, code, origin = pend
        p = self.params
        s0 = p.eidm.s0 if is_cav else p.hv.s0
        amax = p.eidm.a_max if is_cav else p.hv.a_max
        bcomf = p.eidm.b_comf if is_cav else p.hv.b_comf
        x0 = 0.0 if origin == 0 else float(self.merge_start[origin - 1])
        v_cap = vdes if origin == 0 else min(vdes, self.demand.ramp_entry_speed_kmh / 3.6)

        s = self._starts()
        seg = self.order[s[code]: s[code + 1]]
        if seg.size:
            lead = int(seg[0])  # rearmost in the lane is the entrant's leader
            gap0 = float(self.pos[lead] - self.length[lead] - x0)
            v_lead = float(self.v[lead])
            if gap0 <= s0 + 1.0:
                return False
            # entry gate uses the time gap the entrant will actually run so the
            # origin saturates at stream capacity, not at a conservative bound
            if is_cav:
                lead_cav = self.cls[lead] == CAV
                T = p.eidm.t_intra if (lead_cav and self.cfg.comm_mode != "off") else p.eidm.t_inter
            else:
                T = p.hv.desired_time_gap
            v0 = min(v_cap, max(v_lead, 3.0)) if gap0 < 150.0 else v_cap
            sstar = s0 + max(0.0, v0 * T + v0 * (v0 - v_lead) / (2.0 * np.sqrt(amax * bcomf)))
            a_in = amax * (1.0 - (v0 / vdes) ** 4 - (sstar / gap0) ** 2)
            if a_in < -bcomf:
                return False
        else:
            v0 = v_cap

        if not self.free:
            self._grow_all()
        slot = self.free.pop()
        self.pos[slot] = x0
        self.v[slot] = v0
        self.a[slot] = 0.0
        self.length[slot] = self.cfg.vehicle_length
        self.vdes[slot] = vdes
        self.s0[slot] = s0
        self.amax[slot] = amax
        self.bcomf[slot] = bcomf
        self.sqab2[slot] = 2.0 * np.sqrt(amax * bcomf)
        self.noise[slot] = 0.0
        self.dist[slot] = 0.0
        self.entry_t[slot] = t
        self.lc_until[slot] = 0.0
        self.dtg[slot] = 1.2 if is_cav else 1.4
        self.lanecode[slot] = code
        self.cls[slot] = CAV if is_cav else HV
        self.origin[slot] = origin
        self.destid[slot] = dest
        self.vid[slot] = vid
        self.comm_ok[slot] = self.cfg.comm_mode == "on"
        if self.delay_steps > 0:
            if seg.size:
                self._ring_gap[slot] = gap0
                self._ring_lv[slot] = v_lead
            else:
                self._ring_gap[slot] = np.inf
                self._ring_lv[slot] = 0.0
            self._ring_la[slot] = 0.0
        self._order_insert(slot, code)
        self.n_entered += 1
        if t >= self.warmup:
            self.kpi_entered[self._bin(t)] += 1
        return True

    def _spawn_phase(self, t: float) -> None:
        arrivals = self.rng_spawn.poisson(self.rate_per_step)
        for origin in range(1 + self.R):
            for _ in range(int(arrivals[origin])):
                self.queues[origin].append(self._draw_arrival(origin))
            q = self.queues[origin]
            while q and self._try_insert(q[0], t):
                q.pop(0)

    # -- helpers ------------------------------------------------------------

    def _bin(self, t: float) -> int:
        return min(int((t - self.warmup) / KPI_BIN), self.n_bins - 1)

    def _hypo_T_pair(self, slot, other_slot) -> float:
        """Scalar pair-dependent hypothetical desired time gap."""
        if self.cls[slot] != CAV:
            return self.params.hv.desired_time_gap
        if other_slot >= 0 and self.cls[other_slot] == CAV and self.cfg.comm_mode != "off":
            return self.params.eidm.t_intra
        return self.params.eidm.t_inter

    def _check_move(self, slot: int, code: int, bound: float) -> bool:
        """Validate a lane move against the live order (commit-time safety gate).

        Uses the same controller-true acceleration request as the decision
        screen so serial commits cannot contradict the accepted decision.
        """
        lc = self.params.lane_change
        s = self._starts()
        seg = self.order[s[code]: s[code + 1]]
        x = self.pos[slot]
        j = int(np.searchsorted(self.pos[seg], x))
        if j < seg.size:
            lead = int(seg[j])
            lead_gap = self.pos[lead] - self.length[lead] - x
            if lead_gap < lc.min_physical_gap or \
                    not self._kin_gap_ok(lead_gap, self.v[slot], self.v[lead]):
                return False
            a = self._ctrl_rows(np.array([self.v[slot]]), np.array([lead_gap]),
                                np.array([self.v[lead]]), np.array([self.a[lead]]),
                                np.array([self._hypo_T_pair(slot, lead)]), np.array([slot]))
            if a[0] < -bound:
                return False
        if j > 0:
            lag = int(seg[j - 1])
            lag_gap = x - self.length[slot] - self.pos[lag]
            if lag_gap < lc.min_physical_gap or \
                    not self._kin_gap_ok(lag_gap, self.v[lag], self.v[slot]):
                return False
            a = self._ctrl_rows(np.array([self.v[lag]]), np.array([lag_gap]),
                                np.array([self.v[slot]]), np.array([self.a[slot]]),
                                np.array([self._hypo_T_pair(lag, slot)]), np.array([lag]))
            if a[0] < -bound:
                return False
        return True

    def _commit_move(self, slot: int, code: int) -> None:
        self._order_remove(slot)
        self.lanecode[slot] = code
        self._order_insert(slot, code)

    # -- the step -----------------------------------------------------------

    def step(self) -> None:
        t = self.step_index * DT
        t_new = t + DT
        o = self.order
        n = o.size
        p = self.params

        if n == 0:
            self.step_index += 1
            self._spawn_phase(t_new)
            return

        po = self.pos[o]
        vo = self.v[o]
        ao = self.a[o]
        clso = self.cls[o]
        starts = self._starts()

        # leader wiring within lanes
        lead = np.full(n, -1, dtype=np.int64)
        if n > 1:
            lead[:-1] = o[1:]
        seg_ends = starts[1:][self.counts > 0] - 1
        lead[seg_ends] = -1
        has_lead = lead >= 0
        lsafe = np.where(has_lead, lead, o[0])
        lpos = np.where(has_lead, self.pos[lsafe], np.inf)
        gap = np.where(has_lead, lpos - self.length[lsafe] - po, np.inf)
        lv = np.where(has_lead, self.v[lsafe], 0.0)
        la = np.where(has_lead, self.a[lsafe], 0.0)
        lcls = np.where(has_lead, self.cls[lsafe], HV)

        # phase 1: 2-Hz communication refresh
        if self.step_index % self.comm_every == 0:
            self._comm_phase(t, o, po, clso, has_lead, lcls, lpos)

        # phase 2: control from the frozen snapshot
        acc = self._control_phase(o, po, vo, ao, clso, has_lead, gap, lv, la, lcls)
        self.a[o] = acc

        # phase 3: lane changes (decisions from the snapshot, serial commit)
        if self.L > 1 or self.R > 0:
            self._lane_phase(t, o, po, vo, clso, has_lead, gap, lv, lcls, starts, acc)

        # phase 4: kinematics (order may have been spliced; work in slot space)
        o2 = self.order
        vv = self.v[o2]
        aa = self.a[o2]
        v_new = vv + aa * DT
        stopping = v_new < 0.0
        dx_stop = np.where(aa < 0.0, -vv * vv / np.where(aa < 0.0, 2.0 * aa, -1.0), 0.0)
        dx = np.where(stopping, dx_stop, vv * DT + 0.5 * aa * DT * DT)
        dx = np.maximum(dx, 0.0)
        v_new = np.maximum(v_new, 0.0)
        oldpos = self.pos[o2]
        newpos = oldpos + dx
        lco2 = self.lanecode[o2]

        # acceleration-lane overrun safety net (wall car-following should prevent it)
        for k in range(self.R):
            mwall = (lco2 == self.L + k) & (newpos > self.merge_end[k] - 0.2)
            if np.any(mwall):
                i = np.flatnonzero(mwall)
                newpos[i] = self.merge_end[k] - 0.2
                v_new[i] = 0.0
                dx[i] = np.maximum(newpos[i] - oldpos[i], 0.0)
                self.stats["wall_clamps"] += int(i.size)

        self.pos[o2] = newpos
        self.v[o2] = v_new
        self.dist[o2] += dx

        self._integrity_check(o2, newpos)

        if t_new > self.warmup:
            b = self._bin(t_new)
            self.kpi_vdx[b] += float(np.dot(v_new, dx))
            self.kpi_dx[b] += float(dx.sum())
            if b != self._last_bin_seen:
                if self._last_bin_seen >= 0:
                    self._snapshot_delay(t, self._last_bin_seen)
                self._last_bin_seen = b

        # phase 5: detector capture
        aa_now = aa
        mainline_rows = lco2 < self.L
        for d in range(self.det_pos.size):
            dp = self.det_pos[d]
            m = mainline_rows & (oldpos < dp) & (newpos >= dp)
            if not np.any(m):
                continue
            for i in np.flatnonzero(m):
                slot = int(o2[i])
                code = int(lco2[i])
                hw = t_new - self.det_last_t[d, code]
                self.det_last_t[d, code] = t_new
                if t_new > self.warmup:
                    self._det_rows.append((d + 1, code + 1, int(self.vid[slot]),
                                           int(self.cls[slot]), t_new, float(v_new[i]),
                                           float(aa_now[i]), float(hw)))

        # phase 6: exits then spawns
        self._exit_phase(t_new, o2, oldpos, newpos, lco2)
        self._spawn_phase(t_new)
        self.step_index += 1

    # -- phases -------------------------------------------------------------

    def _comm_phase(self, t, o, po, clso, has_lead, lcls, lpos) -> None:
        mode = self.cfg.comm_mode
        cavm = clso == CAV
        ncav = int(np.count_nonzero(cavm))
        if ncav == 0:
            return
        cp = self.params.comm
        if mode != "model":
            ok = mode == "on"
            self.comm_ok[o[cavm]] = ok
            return
        cpos = po[cavm]
        csort = np.sort(cpos)
        hi = np.searchsorted(csort, cpos + cp.phi, side="right")
        lo = np.searchsorted(csort, cpos - cp.phi, side="left")
        delta = (hi - lo) / (2.0 * cp.phi / 1000.0)
        xi_raw = delta * cp.phi * cp.f
        n_xi_clamp = int(np.sum(xi_raw > cp.xi_max))
        xi = np.minimum(xi_raw, cp.xi_max)
        self.stats["xi_clamps"] += n_xi_clamp

        xi_all = np.zeros(o.size)
        xi_all[cavm] = xi
        pairm = cavm & has_lead & (lcls == CAV)
        npairs = int(np.count_nonzero(pairm))
        p_sum = 0.0
        n_success = 0
        if npairs:
            if not hasattr(self, "_poly_rows"):
                self._poly_rows = self.coeffs.xi_poly(cp.phi)
            dist = (lpos[pairm] - po[pairm]) / cp.phi
            clamps: dict[str, int] = {}
            from .comm import reception_probability_fast
            psingle = reception_probability_fast(dist, xi_all[pairm], self._poly_rows, clamps)
            self.stats["p_low_clamps"] += clamps.get("p_low", 0)
            self.stats["p_high_clamps"] += clamps.get("p_high", 0)
            p5 = 1.0 - (1.0 - psingle) ** cp.attempts
            okdraw = self.rng_comm.random(npairs) < p5
            self.comm_ok[o[pairm]] = okdraw
            p_sum = float(psingle.sum())
            n_success = int(okdraw.sum())
        self.comm_ok[o[cavm & ~pairm]] = False
        if t >= self.warmup:
            self._comm_rows.append((t, ncav, float(delta.sum()), float(delta.max()),
                                    float(xi.mean()), npairs, p_sum, n_success, n_xi_clamp))

    def _control_phase(self, o, po, vo, ao, clso, has_lead, gap, lv, la, lcls):
        p = self.params
        e = p.eidm
        cav_rows = clso == CAV

        if self.delay_steps > 0 and np.any(~cav_rows):
            ptr = self.step_index % self.delay_steps
            h = ~cav_rows
            hs = o[h]
            g_now, lv_now, la_now = gap[h].copy(), lv[h].copy(), la[h].copy()
            gap = gap.copy(); lv = lv.copy(); la = la.copy()
            gap[h] = self._ring_gap[hs, ptr]
            lv[h] = self._ring_lv[hs, ptr]
            la[h] = self._ring_la[hs, ptr]
            self._ring_gap[hs, ptr] = g_now
            self._ring_lv[hs, ptr] = lv_now
            self._ring_la[hs, ptr] = la_now

        T = np.where(cav_rows,
                     np.where(has_lead & (lcls == CAV) & self.comm_ok[o], e.t_intra, e.t_inter),
                     p.hv.desired_time_gap)
        self.dtg[o] = T

        s0o = self.s0[o]
        amaxo = self.amax[o]
        vdeso = self.vdes[o]
        dyn = vo * T + vo * (vo - lv) / self.sqab2[o]
        sstar = s0o + np.maximum(0.0, dyn)
        ratio = np.where(np.isfinite(gap), sstar / np.where(np.isfinite(gap), gap, 1.0), 0.0)
        frac = vo / vdeso
        frac2 = frac * frac
        a_idm = amaxo * (1.0 - frac2 * frac2 - ratio * ratio)

        acc = a_idm.copy()

        ci = np.flatnonzero(cav_rows & has_lead)
        if ci.size:
            vi = vo[ci]
            gi = gap[ci]
            vli = lv[ci]
            a_eff = np.minimum(la[ci], ao[ci])
            dv = vi - vli
            denom = vli * vli - 2.0 * gi * a_eff
            first = np.where(denom != 0.0, vi * vi * a_eff / np.where(denom != 0.0, denom, 1.0),
                             -vi * vi / (2.0 * gi))
            second = a_eff - dv * dv * (dv > 0.0) / (2.0 * gi)
            a_cah = np.where(vli * dv <= -2.0 * gi * a_eff, first, second)
            ai = a_idm[ci]
            blend = (1.0 - e.c_cool) * ai + e.c_cool * (
                a_cah + e.b_comf * np.tanh((ai - a_cah) / e.b_comf))
            acc[ci] = np.where(ai >= a_cah, ai, blend)

        hvi = np.flatnonzero(~cav_rows)
        if hvi.size:
            hv_slots = o[hvi]
            decay = np.exp(-DT / p.hv.noise_tau)
            scale = p.hv.noise_sigma * np.sqrt(1.0 - decay * decay)
            fresh = self.rng_noise.standard_normal(hvi.size)
            ns = np.clip(self.noise[hv_slots] * decay + scale * fresh,
                         -p.hv.noise_bound, p.hv.noise_bound)
            self.noise[hv_slots] = ns
            acc[hvi] = np.clip(acc[hvi] + ns, -EMERGENCY_DECEL, p.hv.a_max + p.hv.noise_bound)

        # acceleration-lane wall: brake for the lane end only once the comfortable
        # stopping horizon is reached, so mergers first accelerate to match
        # mainline speed (the purpose of an acceleration lane)
        lco = self.lanecode[o]
        for k in range(self.R):
            wi = np.flatnonzero(lco == self.L + k)
            if wi.size == 0:
                continue
            gw = self.merge_end[k] - po[wi]
            vw = vo[wi]
            engage = gw < vw * vw / 12.0 + 8.0
            if np.any(engage):
                wj = wi[engage]
                gwe = np.maximum(gw[engage], 0.05)
                vwe = vw[engage]
                sw = self.s0[o[wj]] + vwe * T[wj] + vwe * vwe / self.sqab2[o[wj]]
                a_wall = self.amax[o[wj]] * (1.0 - (vwe / vdeso[wj]) ** 4 - (sw / gwe) ** 2)
                acc[wj] = np.minimum(acc[wj], a_wall)

        # off-ramp-bound vehicles still left of lane 1 ease off toward the
        # diverge (comfort-bounded, never to a stop: a missed exit rolls past
        # the gore and continues) so target-lane speeds are matched and gap
        # acceptance can succeed without collapsing the lane behind them
        if self.R:
            dest = self.destid[o]
            bound_off = dest < self.R
            if np.any(bound_off):
                offv = np.where(bound_off, self._off_by_dest[np.minimum(dest, self.R - 1)], np.inf)
                rem = offv - po
                lcp = self.params.lane_change
                seek = bound_off & (lco >= 1) & (lco < self.L) & (rem >= 0.0) & \
                       (rem <= lcp.offramp_prepare_distance)
                if np.any(seek):
                    v_cap = np.sqrt(3.0 * np.maximum(rem, 0.0)) + 6.0
                    over = seek & (vo > v_cap)
                    acc[over] = np.minimum(acc[over], -2.0)

        return np.maximum(acc, -EMERGENCY_DECEL)

    def _target_neighbors(self, o, po, starts, rows, tcodes):
        """Lead/lag context in each row's target lane.

        ``tcodes`` must be non-decreasing (rows ascend in ordered space, which
        is lane-grouped), so per-lane work happens on contiguous slices.
        """
        n = rows.size
        lead_gap = np.full(n, np.inf)
        lead_v = np.zeros(n)
        lead_a = np.zeros(n)
        lead_cav = np.zeros(n, dtype=bool)
        lag_gap = np.full(n, np.inf)
        lag_v = np.zeros(n)
        lag_oidx = np.zeros(n, dtype=np.int64)
        has_lag = np.zeros(n, dtype=bool)
        bounds = np.searchsorted(tcodes, np.arange(self.n_codes + 1))
        for c in range(self.n_codes):
            lo, hi = int(bounds[c]), int(bounds[c + 1])
            if lo == hi:
                continue
            seg = self.order[starts[c]: starts[c + 1]]
            if seg.size == 0:
                continue
            segpos = self.pos[seg]
            r = rows[lo:hi]
            x = po[r]
            jj = segpos.searchsorted(x)
            jl = np.minimum(jj, seg.size - 1)
            lead_ok = jj < seg.size
            lead_gap[lo:hi] = np.where(lead_ok, segpos[jl] - self.length[seg[jl]] - x, np.inf)
            lead_v[lo:hi] = np.where(lead_ok, self.v[seg[jl]], 0.0)
            lead_a[lo:hi] = np.where(lead_ok, self.a[seg[jl]], 0.0)
            lead_cav[lo:hi] = lead_ok & (self.cls[seg[jl]] == CAV)
            jg = np.maximum(jj - 1, 0)
            lag_ok = jj > 0
            lag_gap[lo:hi] = np.where(lag_ok, x - self.length[o[r]] - segpos[jg], np.inf)
            lag_v[lo:hi] = np.where(lag_ok, self.v[seg[jg]], 0.0)
            lag_oidx[lo:hi] = starts[c] + jg
            has_lag[lo:hi] = lag_ok
        return lead_gap, lead_v, lead_a, lead_cav, lag_gap, lag_v, lag_oidx, has_lag

    def _idm_rows(self, v, gap, v_lead, T, slots):
        """Vectorized IDM over explicit slot params (hypothetical evaluations)."""
        dyn = v * T + v * (v - v_lead) / self.sqab2[slots]
        sstar = self.s0[slots] + np.maximum(0.0, dyn)
        r = np.where(np.isfinite(gap), sstar / np.maximum(gap, 1e-9), 0.0)
        f = v / self.vdes[slots]
        return self.amax[slots] * (1.0 - f * f * f * f - r * r)

    def _ctrl_rows(self, v, gap, v_lead, a_lead, T, slots):
        """Hypothetical acceleration using each slot's actual controller:
        E-IDM (CAH-damped) for CAVs, the deterministic IDM core for HVs.
        This is the "deceleration request" gap acceptance is bounded by."""
        a_idm = self._idm_rows(v, gap, v_lead, T, slots)
        cav = self.cls[slots] == CAV
        if not np.any(cav):
            return np.maximum(a_idm, -EMERGENCY_DECEL)
        e = self.params.eidm
        g = np.where(np.isfinite(gap), np.maximum(gap, 1e-9), 1e9)
        a_eff = np.minimum(a_lead, self.a[slots])
        dv = v - v_lead
        denom = v_lead * v_lead - 2.0 * g * a_eff
        first = np.where(denom != 0.0, v * v * a_eff / np.where(denom != 0.0, denom, 1.0),
                         -v * v / (2.0 * g))
        second = a_eff - dv * dv * (dv > 0.0) / (2.0 * g)
        a_cah = np.where(v_lead * dv <= -2.0 * g * a_eff, first, second)
        blend = (1.0 - e.c_cool) * a_idm + e.c_cool * (
            a_cah + e.b_comf * np.tanh((a_idm - a_cah) / e.b_comf))
        out = np.where(cav & (a_idm < a_cah), blend, a_idm)
        return np.maximum(out, -EMERGENCY_DECEL)

    @staticmethod
    def _kin_gap_ok(gap, v_rear, v_front, floor=0.5):
        """Physical feasibility of an insertion: the rear vehicle closing at
        dv can stop the approach within the gap at less than the emergency
        deceleration (dv^2/16 < dv^2/(2*9)) plus a hard clearance floor."""
        dv = np.maximum(np.asarray(v_rear, dtype=float) - np.asarray(v_front, dtype=float), 0.0)
        return np.asarray(gap, dtype=float) > dv * dv / 16.0 + floor

    def _pair_T(self, slots, other_is_cav):
        """Hypothetical desired time gap: the DTG the subject would run behind
        the prospective leader (short gap expected behind a CAV when the
        channel operates, long otherwise; humans always 1.4 s)."""
        e = self.params.eidm
        short_ok = self.cfg.comm_mode != "off"
        t_cav = np.where(other_is_cav & short_ok, e.t_intra, e.t_inter)
        return np.where(self.cls[slots] == CAV, t_cav, self.params.hv.desired_time_gap)

    def _lane_phase(self, t, o, po, vo, clso, has_lead, gap, lv, lcls, starts, acc) -> None:
        lc = self.params.lane_change
        lco = self.lanecode[o]
        e = self.params.eidm
        hvp = self.params.hv
        movers: list[tuple] = []  # (pos, slot, target_code, bound, discretionary)

        def accept_mandatory(rows, tcodes, bounds):
            (lead_gap, lead_v, lead_a, lead_cav, lag_gap, lag_v, lag_oidx, has_lag) = \
                self._target_neighbors(o, po, starts, rows, tcodes)
            slots = o[rows]
            T_self = self._pair_T(slots, lead_cav)
            a_self = self._ctrl_rows(vo[rows], lead_gap, lead_v, lead_a, T_self, slots)
            lag_slots = o[lag_oidx]
            T_lag = self._pair_T(lag_slots, self.cls[slots] == CAV)
            a_lag = self._ctrl_rows(lag_v, lag_gap, vo[rows], self.a[slots], T_lag, lag_slots)
            ok = (lead_gap > lc.min_physical_gap) & (lag_gap > lc.min_physical_gap)
            ok &= self._kin_gap_ok(lead_gap, vo[rows], lead_v)
            ok &= self._kin_gap_ok(lag_gap, lag_v, vo[rows])
            ok &= a_self >= -bounds
            ok &= ~(has_lag & (a_lag < -bounds))
            return ok

        # mandatory: acceleration-lane merges into lane 1
        if self.R:
            mrows = np.flatnonzero(lco >= self.L)
            if mrows.size:
                k = (lco[mrows] - self.L).astype(np.int64)
                remaining = self.merge_end[k] - po[mrows]
                u = np.clip(1.0 - remaining / self.accel_len[k], 0.0, 1.0)
                bounds = lc.b_safe + (lc.b_safe_max - lc.b_safe) * u
                ok = accept_mandatory(mrows, np.zeros(mrows.size, dtype=np.int64), bounds)
                for i, b in zip(mrows[ok], bounds[ok]):
                    movers.append((po[i], int(o[i]), 0, float(b), False))

        # mandatory: off-ramp approach, seek lane 1 within the preparation zone
        if self.R:
            dest = self.destid[o]
            off = np.where(dest < self.R, self._off_by_dest[np.minimum(dest, self.R - 1)], np.inf)
            seek = (dest < self.R) & (lco >= 1) & (lco < self.L) & \
                   (off - po <= lc.offramp_prepare_distance) & (off - po >= 0.0)
            srows = np.flatnonzero(seek)
            if srows.size:
                remaining = off[srows] - po[srows]
                u = np.clip(1.0 - remaining / lc.offramp_prepare_distance, 0.0, 1.0)
                bounds = lc.b_safe + (lc.b_safe_max - lc.b_safe) * u
                ok = accept_mandatory(srows, (lco[srows] - 1).astype(np.int64), bounds)
                for i, b in zip(srows[ok], bounds[ok]):
                    movers.append((po[i], int(o[i]), int(lco[i]) - 1, float(b), False))
            seek_mask = seek
        else:
            seek_mask = np.zeros(o.size, dtype=bool)

        # dedicated-lane attraction: eligible CAVs join the adjacent reserved
        # lane while it still moves well; MOBIL alone never fills a managed
        # lane to capacity because platoon entry always looks locally worse
        stag = (o % 10) == (self.step_index % 10)
        if self.reserved_codes.size:
            gpl_edge = int(self.reserved_codes.min()) - 1
            attract = (clso == CAV) & (lco == gpl_edge) & \
                      (self.lc_until[o] <= t) & ~seek_mask
            if self.R:
                dest = self.destid[o]
                far_from_exit = (dest >= self.R) | \
                    (np.where(dest < self.R,
                              self._off_by_dest[np.minimum(dest, self.R - 1)], np.inf) - po
                     > lc.offramp_prepare_distance + 500.0)
                attract &= far_from_exit
            arows = np.flatnonzero(attract)
            if arows.size:
                tcodes = np.full(arows.size, gpl_edge + 1, dtype=np.int64)
                (lead_gap, lead_v, lead_a, lead_cav, lag_gap, lag_v, lag_oidx, has_lag) = \
                    self._target_neighbors(o, po, starts, arows, tcodes)
                slots = o[arows]
                lane_speed = np.where(np.isfinite(lead_gap) & (lead_gap < 200.0),
                                      lead_v, self.vdes[slots])
                want = lane_speed >= lc.managed_speed_ratio * np.minimum(vo[arows],
                                                                         self.vdes[slots])
                a_self = self._ctrl_rows(vo[arows], lead_gap, lead_v, lead_a,
                                         self._pair_T(slots, lead_cav), slots)
                lag_slots = o[lag_oidx]
                a_lag = self._ctrl_rows(lag_v, lag_gap, vo[arows], self.a[slots],
                                        self._pair_T(lag_slots, True), lag_slots)
                ok = want & (lead_gap > lc.min_physical_gap) & (lag_gap > lc.min_physical_gap)
                ok &= self._kin_gap_ok(lead_gap, vo[arows], lead_v)
                ok &= self._kin_gap_ok(lag_gap, lag_v, vo[arows])
                ok &= a_self >= -lc.b_safe
                ok &= ~(has_lag & (a_lag < -lc.b_safe))
                for i in arows[ok]:
                    movers.append((po[i], int(o[i]), gpl_edge + 1, lc.b_safe, True))
                # short retry backoff keeps the every-step attraction cheap
                self.lc_until[o[arows[~ok]]] = t + 0.5
            seek_mask = seek_mask | attract  # attracted rows skip plain MOBIL this tick

        # discretionary MOBIL, staggered so each vehicle is screened at 1 Hz
        if self.L > 1:
            cand = (lco < self.L) & stag & (self.lc_until[o] <= t) & ~seek_mask
            rows0 = np.flatnonzero(cand)
            if rows0.size:
                slots0 = o[rows0]
                v0 = vo[rows0]
                # old-follower context: previous ordered row within the same lane
                prev = rows0 - 1
                lane_first = starts[:-1][self.counts > 0]
                fi = lane_first.searchsorted(rows0, side="left")
                is_first = (fi < lane_first.size) & \
                           (lane_first[np.minimum(fi, lane_first.size - 1)] == rows0)
                has_ol = ~is_first & (prev >= 0)
                ol_oidx = np.where(has_ol, np.maximum(prev, 0), 0)
                ol_slots = o[ol_oidx]
                released = np.where(has_lead[rows0], gap[rows0] + po[rows0] - self.pos[ol_slots],
                                    np.inf)
                T_ol = self._pair_T(ol_slots, (lcls[rows0] == CAV) & has_lead[rows0])
                a_ol_new = self._idm_rows(self.v[ol_slots], released, lv[rows0], T_ol, ol_slots)
                d_old = np.where(has_ol, a_ol_new - acc[ol_oidx], 0.0)

                gains = np.full((rows0.size, 2), -np.inf)
                for di, dcode in ((0, 1), (1, -1)):
                    tcode = (lco[rows0] + dcode).astype(np.int64)
                    valid = (tcode >= 0) & (tcode < self.L)
                    if dcode == 1 and self.reserved_codes.size:
                        valid &= ~((self.cls[slots0] == HV) & (tcode >= self.first_reserved))
                    sub = np.flatnonzero(valid)
                    if sub.size == 0:
                        continue
                    rows = rows0[sub]
                    (lead_gap, lead_v, lead_a, lead_cav, lag_gap, lag_v, lag_oidx, has_lag) = \
                        self._target_neighbors(o, po, starts, rows, tcode[sub])
                    a_self_new = self._ctrl_rows(v0[sub], lead_gap, lead_v, lead_a,
                                                 self._pair_T(slots0[sub], lead_cav),
                                                 slots0[sub])
                    safe = (a_self_new >= -lc.b_safe)
                    safe &= lead_gap > lc.min_physical_gap
                    safe &= lag_gap > lc.min_physical_gap
                    safe &= self._kin_gap_ok(lead_gap, v0[sub], lead_v)
                    safe &= self._kin_gap_ok(lag_gap, lag_v, v0[sub])
                    lag_slots = o[lag_oidx]
                    T_lag = self._pair_T(lag_slots, self.cls[slots0[sub]] == CAV)
                    a_lag_new = self._ctrl_rows(lag_v, lag_gap, v0[sub], self.a[slots0[sub]],
                                                T_lag, lag_slots)
                    safe &= ~(has_lag & (a_lag_new < -lc.b_safe))
                    d_fol = np.where(has_lag, a_lag_new - acc[lag_oidx], 0.0)
                    g = (a_self_new - acc[rows]) + lc.politeness * (d_fol + d_old[sub])
                    g = g - lc.keep_lane_bias
                    if self.reserved_codes.size and lc.managed_bias:
                        is_cav_sub = self.cls[slots0[sub]] == CAV
                        t_res = tcode[sub] >= self.first_reserved
                        c_res = lco[rows] >= self.first_reserved
                        into = t_res & ~c_res
                        outof = ~t_res & c_res
                        # graded pull: CAVs in far GPLs drift toward the managed
                        # side so the edge lane keeps feeding the dedicated lane
                        toward = ~t_res & (dcode == 1) & (tcode[sub] < self.first_reserved)
                        g = g + is_cav_sub * (
                            lc.managed_bias * (into.astype(float) + 0.5 * toward.astype(float))
                            - lc.managed_exit_penalty * outof.astype(float))
                    gains[sub, di] = np.where(safe, g, -np.inf)

                best = np.argmax(gains, axis=1)
                bval = gains[np.arange(rows0.size), best]
                for j in np.flatnonzero(bval > lc.advantage_threshold):
                    i = rows0[j]
                    dcode = 1 if best[j] == 0 else -1
                    movers.append((po[i], int(o[i]), int(lco[i]) + dcode, lc.b_safe, True))

        if not movers:
            return
        movers.sort(key=lambda m: m[0])  # upstream position commits first
        for _, slot, tgt, bound, disc in movers:
            if self._check_move(slot, tgt, bound):
                self._commit_move(slot, tgt)
                if disc:
                    self.lc_until[slot] = t + lc.cooldown
                    self.stats["lane_changes"] += 1
                else:
                    self.stats["mandatory_merges"] += 1

    def _integrity_check(self, o2, newpos) -> None:
        if o2.size == 0:
            return
        if not (np.all(np.isfinite(newpos)) and np.all(np.isfinite(self.v[o2]))
                and np.all(np.isfinite(self.a[o2]))):
            raise IntegrityError(f"non-finite state at t={self.step_index * DT:.1f}")
        if o2.size > 1:
            nxt = o2[1:]
            gapchk = newpos[1:] - self.length[nxt] - newpos[:-1]
            starts = self._starts()
            same = np.ones(o2.size - 1, dtype=bool)
            ends = starts[1:][self.counts > 0] - 1
            same[ends[ends < o2.size - 1]] = False
            bad = same & (gapchk <= 0.0)
            if np.any(bad):
                i = int(np.flatnonzero(bad)[0])
                raise IntegrityError(
                    f"overlap at t={self.step_index * DT:.1f}: slots {o2[i]}->{o2[i + 1]} "
                    f"lane {self.lanecode[o2[i]]} gap {gapchk[i]:.3f}")
            if np.any(same):
                g = float(gapchk[same].min())
                if g < self.stats["min_gap"]:
                    self.stats["min_gap"] = g
        if self.reserved_codes.size:
            lco2 = self.lanecode[o2]
            viol = (self.cls[o2] == HV) & (lco2 >= self.first_reserved) & (lco2 < self.L)
            self.stats["ineligible_occupancy"] += int(np.count_nonzero(viol))

    def _exit_phase(self, t_new, o2, oldpos, newpos, lco2) -> None:
        mainline = lco2 < self.L
        if self.R:
            dest = self.destid[o2]
            bound_off = dest < self.R
            offv = np.where(bound_off, self._off_by_dest[np.minimum(dest, self.R - 1)], np.inf)
            crossed = bound_off & (oldpos < offv) & (newpos >= offv) & mainline
            hit = crossed & (lco2 == 0)
            miss = crossed & (lco2 != 0)
            for i in np.flatnonzero(miss):
                self.destid[int(o2[i])] = self.dest_end
                self.stats["missed_exits"] += 1
        else:
            hit = np.zeros(o2.size, dtype=bool)
        leave = hit | (mainline & (newpos >= self.net.mainline_length))
        if np.any(leave):
            for i in np.flatnonzero(leave):
                self._retire(int(o2[i]), t_new)

    def _retire(self, slot: int, t_exit: float) -> None:
        entry = float(self.entry_t[slot])
        dist = float(self.dist[slot])
        travel = t_exit - entry
        delay = travel - dist / float(self.vdes[slot])
        self._veh_rows.append((int(self.vid[slot]), int(self.cls[slot]),
                               int(self.origin[slot]), int(self.destid[slot]),
                               entry, t_exit, dist, travel, delay,
                               float(self.vdes[slot]), 1))
        self._order_remove(slot)
        self.free.append(slot)
        self.n_exited += 1
        if t_exit > self.warmup:
            b = self._bin(t_exit)
            self.kpi_exits[b] += 1
            self.delay_exited_sum += delay
            self.n_exited_measured += 1
            self.dist_exited_measured += dist
            self.time_exited_measured += travel

    def _snapshot_delay(self, t, b) -> None:
        o = self.order
        if o.size:
            pres_delay = float(np.sum((t - self.entry_t[o]) - self.dist[o] / self.vdes[o]))
        else:
            pres_delay = 0.0
        denom = self.n_exited_measured + o.size
        avg = (self.delay_exited_sum + pres_delay) / denom if denom else 0.0
        self._bin_delay_rows.append((b, avg, o.size, sum(len(q) for q in self.queues)))

    # -- run ----------------------------------------------------------------

    def run(self) -> RunResults:
        t0 = _time.perf_counter()
        with np.errstate(divide="ignore", invalid="ignore"):
            self._spawn_phase(0.0)
            for _ in range(self.total_steps):
                self.step()
        t_final = self.total_steps * DT
        self._snapshot_delay(t_final, self._last_bin_seen if self._last_bin_seen >= 0 else 0)
        wall = _time.perf_counter() - t0

        o = self.order
        latent = sum(len(q) for q in self.queues)
        conservation_ok = (self.n_generated == o.size + self.n_exited + latent) and \
                          (self.n_entered == o.size + self.n_exited)
        # vehicles still in the network join the ledger uncompleted so every
        # network KPI is recomputable from vehicles.csv alone
        for slot in o.tolist():
            entry = float(self.entry_t[slot])
            dist = float(self.dist[slot])
            travel = t_final - entry
            delay = travel - dist / float(self.vdes[slot])
            self._veh_rows.append((int(self.vid[slot]), int(self.cls[slot]),
                                   int(self.origin[slot]), int(self.destid[slot]),
                                   entry, float("nan"), dist, travel, delay,
                                   float(self.vdes[slot]), 0))
        pres_delay = float(np.sum((t_final - self.entry_t[o]) - self.dist[o] / self.vdes[o])) if o.size else 0.0
        n_delay = self.n_exited_measured + o.size
        avg_delay = (self.delay_exited_sum + pres_delay) / n_delay if n_delay else 0.0
        throughput = self.n_exited_measured / (self.cfg.measured_duration / 3600.0)

        det = _columns(self._det_rows,
                       ("detector", np.int64), ("lane", np.int64), ("veh_id", np.int64),
                       ("cls", np.int64), ("t", float), ("speed", float),
                       ("accel", float), ("headway", float))
        veh = _columns(self._veh_rows,
                       ("veh_id", np.int64), ("cls", np.int64), ("origin", np.int64),
                       ("dest", np.int64), ("entry_t", float), ("exit_t", float),
                       ("distance", float), ("travel", float), ("delay", float),
                       ("desired_speed", float), ("completed", np.int64))
        comm = _columns(self._comm_rows,
                        ("t", float), ("n_cav", np.int64), ("delta_sum", float),
                        ("delta_max", float), ("xi_mean", float), ("pairs", np.int64),
                        ("p_single_sum", float), ("successes", np.int64),
                        ("xi_clamps", np.int64))
        bins = np.arange(self.n_bins)
        delay_by_bin = np.zeros(self.n_bins)
        present_by_bin = np.zeros(self.n_bins, dtype=np.int64)
        latent_by_bin = np.zeros(self.n_bins, dtype=np.int64)
        for b, avg, npres, nlat in self._bin_delay_rows:
            delay_by_bin[b] = avg
            present_by_bin[b] = npres
            latent_by_bin[b] = nlat
        with np.errstate(invalid="ignore", divide="ignore"):
            speed_kmh = np.where(self.kpi_dx > 0, self.kpi_vdx / np.maximum(self.kpi_dx, 1e-12) * 3.6, np.nan)
        kpi = {
            "bin_start": self.warmup + bins * KPI_BIN,
            "throughput_vph": self.kpi_exits * (3600.0 / KPI_BIN),
            "cum_avg_delay": delay_by_bin,
            "avg_speed_kmh": speed_kmh,
            "veh_km": self.kpi_dx / 1000.0,
            "entered": self.kpi_entered.astype(np.int64),
            "present": present_by_bin,
            "latent": latent_by_bin,
        }
        mg = self.stats["min_gap"]
        summary = {
            "seed": self.seed,
            "policy": self.cfg.policy.value,
            "mpr": self.cfg.mpr,
            "throughput_vph": throughput,
            "avg_delay_s": avg_delay,
            "avg_speed_kmh": float(self.kpi_vdx.sum() / self.kpi_dx.sum() * 3.6) if self.kpi_dx.sum() > 0 else float("nan"),
            "generated": self.n_generated,
            "entered": self.n_entered,
            "exited": self.n_exited,
            "exited_measured": self.n_exited_measured,
            "present_end": int(o.size),
            "latent_end": latent,
            "conservation_ok": bool(conservation_ok),
            "collisions": 0,
            "min_gap_m": None if not np.isfinite(mg) else mg,
            "ineligible_lane_steps": self.stats["ineligible_occupancy"],
            "missed_exits": self.stats["missed_exits"],
            "wall_clamps": self.stats["wall_clamps"],
            "lane_changes": self.stats["lane_changes"],
            "mandatory_merges": self.stats["mandatory_merges"],
            "xi_clamps": self.stats["xi_clamps"],
            "p_low_clamps": self.stats["p_low_clamps"],
            "p_high_clamps": self.stats["p_high_clamps"],
            "wall_time_s": wall,
        }
        return RunResults(scenario=self.scn, seed=self.seed, detectors=det,
                          vehicles=veh, comm=comm, kpi=kpi, summary=summary)


def _columns(rows: list[tuple], *spec) -> dict[str, np.ndarray]:
    if rows:
        cols = list(zip(*rows))
    else:
        cols = [[] for _ in spec]
    return {name: np.asarray(col, dtype=dt) for (name, dt), col in zip(spec, cols)}


def run_replication(scenario: Scenario, seed: int, params: ModelParams | None = None,
                    coeffs: CommCoefficients | None = None) -> RunResults:
    """Run one seeded replication of a validated scenario."""
    return World(scenario, seed, params=params, coeffs=coeffs).run()


# -- CSV output -------------------------------------------------------------

_FORMATS = {
    "t": "%.1f", "entry_t": "%.1f", "exit_t": "%.1f", "bin_start": "%.1f",
    "speed": "%.6f", "accel": "%.6f", "headway": "%.6f", "distance": "%.3f",
    "travel": "%.3f", "delay": "%.6f", "delta_sum": "%.6f", "delta_max": "%.6f",
    "xi_mean": "%.3f", "p_single_sum": "%.9f", "throughput_vph": "%.3f",
    "cum_avg_delay": "%.6f", "avg_speed_kmh": "%.6f", "veh_km": "%.6f",
    "desired_speed": "%.6f",
}


def _write_table(path: Path, table: dict[str, np.ndarray]) -> str:
    names = list(table)
    fmts = [_FORMATS.get(c, "%d" if np.issubdtype(table[c].dtype, np.integer) else "%.6f")
            for c in names]
    n = len(table[names[0]]) if names else 0
    with open(path, "w") as fh:
        fh.write(",".join(names) + "\n")
        for i in range(n):
            vals = []
            for c, f in zip(names, fmts):
                x = table[c][i]
                vals.append("" if isinstance(x, (float, np.floating)) and np.isnan(x) else f % x)
            fh.write(",".join(vals) + "\n")
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_run(res: RunResults, outdir) -> dict[str, str]:
    """Write detectors/vehicles/comm/kpi CSVs plus run_meta.json; returns file hashes."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    hashes = {
        "detectors.csv": _write_table(outdir / "detectors.csv", res.detectors),
        "vehicles.csv": _write_table(outdir / "vehicles.csv", res.vehicles),
        "comm.csv": _write_table(outdir / "comm.csv", res.comm),
        "kpi.csv": _write_table(outdir / "kpi.csv", res.kpi),
    }
    meta = {"schema": 1, "summary": res.summary, "hashes": hashes,
            "policy": res.scenario.cfg.policy.value, "mpr": res.scenario.cfg.mpr,
            "seed": res.seed}
    (outdir / "run_meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return hashes

"""Shared domain types: vehicles, network geometry, demand, scenario configuration.

All distances are meters, speeds m/s, times seconds unless a field name says
otherwise (``*_kmh``, ``*_vph``).  Types are plain dataclasses, immutable after
``validate_scenario`` and safe to share read-only across parallel replications.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

KMH = 1.0 / 3.6  # km/h -> m/s

SIM_STEP = 0.1          # controller update period (10 Hz)
COMM_INTERVAL = 0.5     # broadcast/density refresh period (2 Hz)


class VehicleClass(enum.IntEnum):
    HV = 0
    CAV = 1


class Policy(enum.Enum):
    """Managed-lane policy: none, one, or two leftmost lanes dedicated to CAVs."""

    NML = "NML"
    CAV1 = "CAV1"
    CAV2 = "CAV2"


# Lowest market penetration each policy admits (premature dedication degrades
# performance, hence the floors for the managed-lane policies).
POLICY_MIN_MPR = {Policy.NML: 0.0, Policy.CAV1: 0.3, Policy.CAV2: 0.4}


@dataclass
class VehicleState:
    """One vehicle's kinematic and classification state.

    ``lane`` is 1 = rightmost .. 4 = leftmost on the mainline; acceleration
    lanes use 100 + interchange index.  ``dtg_active`` is the desired time gap
    currently in force: 0.6 or 1.2 s for a CAV, 1.4 s for an HV.
    """

    id: int
    vehicle_class: VehicleClass
    lane: int
    position: float
    speed: float
    accel: float
    length: float
    dtg_active: float
    origin: int
    destination: int
    entry_time: float
    desired_speed: float

    def check(self) -> None:
        if self.speed < 0:
            raise ValueError(f"vehicle {self.id}: speed {self.speed} < 0")
        if self.length <= 0:
            raise ValueError(f"vehicle {self.id}: length {self.length} <= 0")
        if self.lane < 100 and not 1 <= self.lane <= 4:
            raise ValueError(f"vehicle {self.id}: mainline lane {self.lane} not in 1..4")
        allowed = (0.6, 1.2) if self.vehicle_class == VehicleClass.CAV else (1.4,)
        if self.dtg_active not in allowed:
            raise ValueError(
                f"vehicle {self.id}: dtg {self.dtg_active} not in {allowed} for {self.vehicle_class.name}"
            )


@dataclass(frozen=True)
class Interchange:
    """One diamond interchange: point off-ramp diverge upstream, spatial on-ramp downstream."""

    position: float                  # interchange center along the mainline
    offramp_offset: float = 150.0    # diverge sits this far upstream of the center
    accel_lane_length: float = 300.0  # on-ramp acceleration lane, starts at the center
    decel_lane_length: float = 150.0  # geometry record only; diverge is a point capture

    @property
    def offramp_position(self) -> float:
        return self.position - self.offramp_offset

    @property
    def merge_start(self) -> float:
        return self.position

    @property
    def merge_end(self) -> float:
        return self.position + self.accel_lane_length


@dataclass(frozen=True)
class NetworkSpec:
    """Mainline geometry, interchanges and detector stations."""

    mainline_length: float = 9300.0
    lane_count: int = 4
    interchanges: tuple[Interchange, ...] = (Interchange(2000.0), Interchange(6000.0))
    detector_positions: tuple[float, ...] = (1500.0, 4000.0, 7500.0)
    speed_limit_kmh: float = 120.0
    desired_speed_default_kmh: float = 105.0

    def check(self) -> list[str]:
        errs = []
        if self.mainline_length <= 0:
            errs.append("network.mainline_length: must be > 0")
        if not 1 <= self.lane_count <= 4:
            errs.append("network.lane_count: must be in 1..4")
        last = 0.0
        for k, ic in enumerate(self.interchanges):
            if not 0.0 < ic.position < self.mainline_length:
                errs.append(f"network.interchanges[{k}].position: outside (0, mainline_length)")
            if ic.position <= last:
                errs.append(f"network.interchanges[{k}].position: not strictly increasing")
            if ic.merge_end >= self.mainline_length:
                errs.append(f"network.interchanges[{k}]: acceleration lane extends past mainline end")
            last = ic.position
        last = 0.0
        for k, d in enumerate(self.detector_positions):
            if not 0.0 < d < self.mainline_length:
                errs.append(f"network.detector_positions[{k}]: outside (0, mainline_length)")
            if d <= last:
                errs.append(f"network.detector_positions[{k}]: not strictly increasing")
            last = d
        return errs


@dataclass(frozen=True)
class DemandSpec:
    """Origin flows (veh/h) and routing. The mainline origin dominates the ramps
    so the network runs congested; ``mpr`` is the CAV share of every origin."""

    mainline_vph: float = 8000.0
    ramp_vph: tuple[float, ...] = (1000.0, 1000.0)
    offramp_fraction: float = 0.10
    mpr: float = 0.0
    ramp_entry_speed_kmh: float = 60.0

    @property
    def total_vph(self) -> float:
        return self.mainline_vph + sum(self.ramp_vph)

    def check(self, net: NetworkSpec) -> list[str]:
        errs = []
        if self.mainline_vph < 0 or any(r < 0 for r in self.ramp_vph):
            errs.append("demand: all flows must be >= 0")
        if len(self.ramp_vph) != len(net.interchanges):
            errs.append("demand.ramp_vph: one rate per interchange required")
        if self.mainline_vph < sum(self.ramp_vph):
            errs.append("demand.mainline_vph: mainline-origin demand must dominate ramp demand")
        if not 0.0 <= self.offramp_fraction < 0.5:
            errs.append("demand.offramp_fraction: must be in [0, 0.5)")
        if not 0.0 <= self.mpr <= 1.0:
            errs.append("demand.mpr: must be in [0, 1]")
        return errs


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything one replication needs besides the seed of the run."""

    policy: Policy = Policy.NML
    mpr: float = 0.0
    seed: int = 1
    warmup_duration: float = 900.0
    measured_duration: float = 3600.0
    sim_step: float = SIM_STEP
    comm_update_interval: float = COMM_INTERVAL
    replications: int = 5
    vehicle_length: float = 4.5
    comm_mode: str = "model"  # "model" | "on" | "off"

    def check(self) -> list[str]:
        errs = []
        if abs(self.sim_step - SIM_STEP) > 1e-12:
            errs.append("scenario.sim_step: controller update must be 10 Hz (0.1 s)")
        if abs(self.comm_update_interval - COMM_INTERVAL) > 1e-12:
            errs.append("scenario.comm_update_interval: density refresh must be 2 Hz (0.5 s)")
        if not 0.0 <= self.mpr <= 1.0:
            errs.append("scenario.mpr: must be in [0, 1]")
        elif self.mpr < POLICY_MIN_MPR[self.policy] - 1e-12:
            errs.append(
                f"scenario.mpr: below policy minimum "
                f"({self.policy.value} requires mpr >= {POLICY_MIN_MPR[self.policy]:.0%})"
            )
        if self.warmup_duration < 0 or self.measured_duration <= 0:
            errs.append("scenario durations: warmup >= 0 and measured > 0 required")
        if self.replications < 1:
            errs.append("scenario.replications: must be >= 1")
        if self.vehicle_length <= 0:
            errs.append("scenario.vehicle_length: must be > 0")
        if self.comm_mode not in ("model", "on", "off"):
            errs.append("scenario.comm_mode: must be one of model|on|off")
        if not 0 <= int(self.seed) < 2**64:
            errs.append("scenario.seed: must fit in 64 bits")
        return errs


class ScenarioError(ValueError):
    """Raised when a scenario violates an invariant; carries the full error list."""

    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


@dataclass(frozen=True)
class Scenario:
    """A validated (config, network, demand) triple."""

    cfg: ScenarioConfig
    net: NetworkSpec
    demand: DemandSpec


def validate_scenario(cfg: ScenarioConfig, net: NetworkSpec | None = None,
                      demand: DemandSpec | None = None) -> Scenario:
    """Check every invariant; return the normalized scenario or raise ScenarioError.

    Pure: identical inputs yield identical outputs.  The demand's MPR is
    normalized to the scenario's (one MPR per scenario across all O-D pairs).
    """
    net = net if net is not None else NetworkSpec()
    demand = demand if demand is not None else DemandSpec()
    demand = replace(demand, mpr=cfg.mpr)
    errors = cfg.check() + net.check() + demand.check(net)
    if errors:
        raise ScenarioError(errors)
    return Scenario(cfg=cfg, net=net, demand=demand)

"""cavflow: deterministic microscopic freeway simulation of mixed HV/CAV
traffic under managed-lane policies, with the full lane-level measurement
pipeline (headway distributions, speed-flow curves, fuel consumption,
V2V communication statistics, network KPIs)."""

__version__ = "0.1.0"

from .core import (DemandSpec, Interchange, NetworkSpec, Policy, Scenario,
                   ScenarioConfig, ScenarioError, VehicleClass, VehicleState,
                   validate_scenario)
from .longitudinal import (EidmParams, HvParams, LeaderView, cah_accel, desired_gap,
                           eidm_accel, hv_accel, idm_accel, ou_noise_step, select_dtg)
from .comm import (CommCoefficients, CommParams, CommSnapshot, comm_density,
                   load_coefficients, poly_h, reception_probability,
                   retry_success_probability, transmission_success, update_comm)
from .lateral import (LaneChangeParams, LanePolicy, NeighborView,
                      discretionary_lane_change, lane_eligible, mandatory_merge)
from .energy import VtMicroCoefficients, fuel_rate, load_vt_micro
from .engine import IntegrityError, ModelParams, RunResults, World, run_replication, write_run
from .metrics import (EmpiricalCdf, LaneAggregate, aggregate_lane_flows, comm_kpis,
                      fuel_series, headway_series, ks_statistic, ks_two_sample,
                      mean_headway_by, modal_bin, network_kpis, prominent_mode_count,
                      speed_flow_points, stochastically_dominates)

__all__ = [n for n in dir() if not n.startswith("_")]

"""Scenario validation and domain-type invariants."""

import numpy as np
import pytest

from cavflow.core import (DemandSpec, Interchange, NetworkSpec, Policy, ScenarioConfig,
                          ScenarioError, VehicleClass, VehicleState, validate_scenario)


class TestValidateScenario:
    def test_base_condition_valid(self):
        scn = validate_scenario(ScenarioConfig(policy=Policy.NML, mpr=0.0))
        assert scn.cfg.policy == Policy.NML
        assert scn.demand.mpr == 0.0

    def test_cav2_below_minimum_rejected(self):
        with pytest.raises(ScenarioError, match="below policy minimum"):
            validate_scenario(ScenarioConfig(policy=Policy.CAV2, mpr=0.2))

    def test_cav1_boundary(self):
        validate_scenario(ScenarioConfig(policy=Policy.CAV1, mpr=0.3))
        with pytest.raises(ScenarioError):
            validate_scenario(ScenarioConfig(policy=Policy.CAV1, mpr=0.29))

    def test_wrong_controller_rate_rejected(self):
        with pytest.raises(ScenarioError, match="10 Hz"):
            validate_scenario(ScenarioConfig(sim_step=0.2))

    def test_wrong_comm_rate_rejected(self):
        with pytest.raises(ScenarioError, match="2 Hz"):
            validate_scenario(ScenarioConfig(comm_update_interval=1.0))

    def test_error_list_reports_every_violation(self):
        try:
            validate_scenario(ScenarioConfig(policy=Policy.CAV2, mpr=0.1, sim_step=0.2,
                                             replications=0))
        except ScenarioError as e:
            assert len(e.errors) >= 3
        else:
            pytest.fail("expected ScenarioError")

    def test_purity(self):
        a = validate_scenario(ScenarioConfig(policy=Policy.CAV1, mpr=0.5))
        b = validate_scenario(ScenarioConfig(policy=Policy.CAV1, mpr=0.5))
        assert a == b

    def test_demand_mpr_normalized_to_scenario(self):
        scn = validate_scenario(ScenarioConfig(policy=Policy.NML, mpr=0.7),
                                demand=DemandSpec(mpr=0.1))
        assert scn.demand.mpr == 0.7

    def test_network_invariants(self):
        bad = NetworkSpec(detector_positions=(4000.0, 1500.0, 7500.0))
        with pytest.raises(ScenarioError, match="detector"):
            validate_scenario(ScenarioConfig(), net=bad)
        bad2 = NetworkSpec(interchanges=(Interchange(6000.0), Interchange(2000.0)))
        with pytest.raises(ScenarioError, match="interchange"):
            validate_scenario(ScenarioConfig(), net=bad2)

    def test_ramp_demand_must_not_dominate(self):
        with pytest.raises(ScenarioError, match="dominate"):
            validate_scenario(ScenarioConfig(),
                              demand=DemandSpec(mainline_vph=1000.0, ramp_vph=(900.0, 900.0)))


class TestVehicleState:
    def test_dtg_values_enforced(self):
        v = VehicleState(1, VehicleClass.CAV, 1, 0.0, 10.0, 0.0, 4.5, 0.6, 0, 2, 0.0, 29.0)
        v.check()
        v.dtg_active = 1.4
        with pytest.raises(ValueError):
            v.check()
        h = VehicleState(2, VehicleClass.HV, 1, 0.0, 10.0, 0.0, 4.5, 1.4, 0, 2, 0.0, 33.0)
        h.check()

    def test_speed_and_lane_bounds(self):
        v = VehicleState(1, VehicleClass.HV, 5, 0.0, 1.0, 0.0, 4.5, 1.4, 0, 2, 0.0, 33.0)
        with pytest.raises(ValueError):
            v.check()
        v2 = VehicleState(1, VehicleClass.HV, 2, 0.0, -0.1, 0.0, 4.5, 1.4, 0, 2, 0.0, 33.0)
        with pytest.raises(ValueError):
            v2.check()


class TestClassDraw:
    def test_spawn_classes_match_mpr_chi_square(self):
        # generate >= 1e4 arrivals through the engine's own drawing path
        from cavflow.engine import World

        cfg = ScenarioConfig(policy=Policy.NML, mpr=0.3, warmup_duration=0.0,
                             measured_duration=10.0)
        scn = validate_scenario(cfg)
        w = World(scn, 12345)
        n = 20000
        draws = np.array([w._draw_arrival(0)[1] for _ in range(n)])
        obs_cav = draws.sum()
        exp_cav = n * 0.3
        chi2 = (obs_cav - exp_cav) ** 2 / exp_cav + \
               ((n - obs_cav) - n * 0.7) ** 2 / (n * 0.7)
        from scipy.stats import chi2 as chi2_dist
        p = chi2_dist.sf(chi2, df=1)
        assert p > 0.01

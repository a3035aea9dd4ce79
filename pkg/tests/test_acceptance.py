"""Acceptance criteria A1-A9, one test per criterion.

Run with ``pytest tests/test_acceptance.py -s`` to see the per-criterion
PASS/FAIL lines as they complete.  The session fixture executes the full
default evaluation sweep (NML 0-100%, CAV1 30-100%, CAV2 40-100% in 10% steps,
5 seeds per cell = 130 replications) once; the criteria then interrogate its
outputs.  Expect the fixture to take on the order of an hour on two cores.

A1 asserts the idealized pipeline-capacity formula exactly as specified.  The
standard-form IDM this artifact implements cannot reach that figure (its
stationary spacing carries a 1/sqrt(1-(v/v_des)^4) factor the formula omits);
the criterion is therefore expected to FAIL honestly, with the model's true
analytic capacity asserted alongside in its companion test.  See the decisions
ledger for the full analysis.
"""

import itertools
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from fractions import Fraction
from importlib import resources
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

import cavflow as cf
from cavflow.cli import SweepSpec, cell_name, run_cell_seed, run_sweep
from cavflow.core import (DemandSpec, NetworkSpec, Policy, ScenarioConfig,
                          validate_scenario)
from cavflow.engine import run_replication
from cavflow.longitudinal import EidmParams, LeaderView, eidm_accel
from cavflow.metrics import (fuel_series, headway_histogram, ks_statistic, load_run,
                             modal_bin, prominent_mode_count, stochastically_dominates)

DEMAND_VPH = 10000.0
SEEDS = (1, 2, 3, 4, 5)


def report(name: str, ok: bool, detail: str) -> None:
    print(f"{name}: {'PASS' if ok else 'FAIL'} - {detail}", flush=True)
    assert ok, f"{name}: {detail}"


@pytest.fixture(scope="session")
def sweep(tmp_path_factory):
    # Reuse a previously completed default sweep when CAVFLOW_ACCEPT_SWEEP
    # points at one (runs are bit-identical per seed, and A7 reruns a cell
    # subset with the current code, catching any stale data).
    import os

    reuse = os.environ.get("CAVFLOW_ACCEPT_SWEEP")
    if reuse:
        out = Path(reuse)
        metas = list(out.glob("*/seed_*/run_meta.json"))
        if (out / "summary.csv").exists() and len(metas) == 130:
            print(f"\n[sweep fixture] reusing completed sweep at {out}", flush=True)
            return out
        print(f"\n[sweep fixture] {reuse} incomplete; running fresh", flush=True)
    out = tmp_path_factory.mktemp("default_sweep")
    spec = SweepSpec.default(seeds=SEEDS)
    t0 = time.perf_counter()
    fails = run_sweep(spec, out, workers=2, echo=lambda *_: None)
    wall = time.perf_counter() - t0
    print(f"\n[sweep fixture] {len(spec.cells) * len(spec.seeds)} runs in "
          f"{wall / 60:.1f} min, failures={fails}", flush=True)
    assert fails == 0, "sweep had failing cells"
    return out


def summaries(sweep_dir) -> pd.DataFrame:
    return pd.read_csv(Path(sweep_dir) / "summary.csv")


def cell_headways(sweep_dir, policy, mpr, lane) -> np.ndarray:
    df = pd.read_csv(Path(sweep_dir) / cell_name(policy, mpr) / "headways.csv")
    return df.loc[df["lane"] == lane, "headway"].to_numpy()


# -- A1 ----------------------------------------------------------------------

def pipeline_scenario():
    cfg = ScenarioConfig(policy=Policy.NML, mpr=1.0, warmup_duration=300.0,
                         measured_duration=900.0, comm_mode="on")
    net = NetworkSpec(mainline_length=4000.0, lane_count=1, interchanges=(),
                      detector_positions=(3000.0,))
    dem = DemandSpec(mainline_vph=6000.0, ramp_vph=(), offramp_fraction=0.0)
    return validate_scenario(cfg, net, dem)


def analytic_idm_capacity(p: EidmParams, length: float) -> float:
    """True stationary capacity of the standard-form model: max over v of
    v / (s_e(v) + L) with s_e = (s0 + vT)/sqrt(1 - (v/v_des)^4)."""
    v = np.linspace(1.0, p.v_des - 0.01, 2000)
    f = (v / p.v_des) ** 4
    s_e = (p.s0 + v * p.t_intra) / np.sqrt(1.0 - f)
    return float(np.max(v / (s_e + length) * 3600.0))


class TestA1Pipeline:
    def test_a1_pipeline_capacity_formula(self):
        scn = pipeline_scenario()
        t0 = time.perf_counter()
        res = run_replication(scn, 7)
        wall = time.perf_counter() - t0
        thr = res.summary["throughput_vph"]
        p = EidmParams()
        oracle = 3600.0 / (p.t_intra + (p.s0 + scn.cfg.vehicle_length) / p.v_des)
        ok = abs(thr - oracle) <= 0.10 * oracle and wall < 60.0
        report("A1", ok,
               f"throughput {thr:.0f} vph vs formula {oracle:.0f} vph "
               f"(ratio {thr / oracle:.3f}, band +-10%), wall {wall:.0f} s; "
               f"the standard-form IDM's analytic capacity is "
               f"{analytic_idm_capacity(p, scn.cfg.vehicle_length):.0f} vph - see ledger")

    def test_a1_companion_true_capacity_oracle(self):
        # the model's own stationary-capacity oracle, derived independently of
        # the engine from the controller's equilibrium
        scn = pipeline_scenario()
        res = run_replication(scn, 7)
        thr = res.summary["throughput_vph"]
        cap = analytic_idm_capacity(EidmParams(), scn.cfg.vehicle_length)
        ok = abs(thr - cap) <= 0.07 * cap
        report("A1b", ok, f"throughput {thr:.0f} vph vs analytic capacity {cap:.0f} vph "
                          f"(ratio {thr / cap:.3f}, band +-7%)")


# -- A2 ----------------------------------------------------------------------

class TestA2ManagedLaneCapacity:
    def test_a2_cav_lane_flow_band(self, sweep):
        df = pd.read_csv(Path(sweep) / cell_name("CAV1", 0.9) / "speedflow.csv")
        details = []
        ok = True
        for seed in SEEDS:
            d = df[df["seed"] == seed]
            cav_max = d.loc[d["lane"] == 4, "flow_vph"].max()
            gpl_max = d.loc[d["lane"] < 4, "flow_vph"].max()
            in_band = 2900.0 <= cav_max <= 3900.0
            tops = cav_max > gpl_max
            ok &= in_band and tops
            details.append(f"seed {seed}: lane4 {cav_max:.0f} gplmax {gpl_max:.0f}")
        report("A2", ok, "CAV1@90% 5-min lane-4 max in [2900,3900] and above "
                         "every GPL max per seed; " + "; ".join(details))


# -- A3 ----------------------------------------------------------------------

class TestA3ThroughputOrdering:
    def test_a3_throughput_trends(self, sweep):
        s = summaries(sweep)
        nml = s[s["policy"] == "NML"].groupby("mpr")["throughput_vph"].mean()
        thr0 = nml.loc[0.0]
        thr100 = nml.loc[1.0]
        cond1 = thr0 < 0.8 * DEMAND_VPH
        cond2 = thr100 >= 1.2 * thr0
        vals = nml.sort_index().to_numpy()
        cond3 = bool(np.all(np.diff(vals) >= -0.02 * vals[:-1]))
        report("A3", cond1 and cond2 and cond3,
               f"thr(0%)={thr0:.0f} (<8000: {cond1}), thr(100%)={thr100:.0f} "
               f"(>=1.2x: {cond2}), NML non-decreasing within 2%: {cond3} "
               f"[{', '.join(f'{v:.0f}' for v in vals)}]")


# -- A4 ----------------------------------------------------------------------

class TestA4HeadwayRegimes:
    def test_a4_modality_and_modal_bins(self, sweep):
        # the regime-structure diagnostic across the mid-range MPRs: mixed NML
        # lanes keep the two-spike structure, the dedicated lane has one spike
        nml_modes, cav_modes = {}, {}
        for mpr in (0.6, 0.7, 0.8):
            nml_modes[mpr] = prominent_mode_count(
                headway_histogram(cell_headways(sweep, "NML", mpr, lane=4))[0])
            cav_modes[mpr] = prominent_mode_count(
                headway_histogram(cell_headways(sweep, "CAV1", mpr, lane=4))[0])
        cond_bi = nml_modes[0.6] >= 2
        cond_uni = cav_modes[0.6] == 1
        cond_range = all(v >= 2 for v in nml_modes.values()) and \
            all(v == 1 for v in cav_modes.values())
        bins_ok = True
        bins = {}
        for mpr in (0.5, 0.6, 0.7, 0.8, 0.9, 1.0):
            hw = cell_headways(sweep, "CAV1", mpr, lane=4)
            lo, hi = modal_bin(hw)
            bins[mpr] = (round(lo, 1), round(hi, 1))
            bins_ok &= lo >= 0.8 - 1e-9 and hi <= 1.2 + 1e-9
        report("A4", cond_bi and cond_uni and cond_range and bins_ok,
               f"NML lane-4 modes {nml_modes} (>=2), CAV1 lane-4 modes {cav_modes} "
               f"(==1), CAV1 modal bins MPR>=50%: {bins}")


# -- A5 ----------------------------------------------------------------------

class TestA5KsCorrectness:
    def test_a5_exhaustive_equivalence(self):
        t0 = time.perf_counter()
        alphabet = (1, 2, 3, 4, 5)
        multisets = []
        for k in range(1, 9):
            multisets.extend(itertools.combinations_with_replacement(alphabet, k))
        # count-vector CDF oracle: D = max |F_a - F_b| over the 5 support points
        counts = np.zeros((len(multisets), 5))
        for r, m in enumerate(multisets):
            for v in m:
                counts[r, v - 1] += 1
        cdfs = np.cumsum(counts, axis=1) / counts.sum(axis=1, keepdims=True)
        arrs = [np.asarray(m, dtype=float) for m in multisets]
        n = len(multisets)
        rng = np.random.Generator(np.random.PCG64(0))
        bad = 0
        checked = 0
        # exhaustive over unordered pairs (the statistic is symmetric, which the
        # unit suite verifies separately)
        for i in range(n):
            fa = cdfs[i]
            d_oracle_row = np.abs(cdfs[i:] - fa).max(axis=1)
            for off, j in enumerate(range(i, n)):
                d = ks_statistic(arrs[i], arrs[j])
                checked += 1
                if abs(d - d_oracle_row[off]) > 1e-12:
                    bad += 1
        wall = time.perf_counter() - t0
        ident = ks_statistic([1, 2, 3], [1, 2, 3]) == 0.0
        disj = ks_statistic([1, 1], [5, 5]) == 1.0
        report("A5", bad == 0 and ident and disj and wall < 10.0,
               f"{checked} pairs (size<=8, 5-value alphabet), mismatches={bad}, "
               f"D(identical)==0: {ident}, D(disjoint)==1: {disj}, wall {wall:.1f} s")


# -- A6 ----------------------------------------------------------------------

def _reception_fraction_oracle(x, delta, phi, f):
    text = resources.files("cavflow.data").joinpath(
        "dsrc_reception_coefficients.txt").read_text()
    table = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        i, j, k, c = line.split()
        table[(int(i), int(j), int(k))] = Fraction(c)
    xi = Fraction(delta) * Fraction(phi) * Fraction(f)
    r = Fraction(x) / Fraction(phi)
    poly = Fraction(1)
    for i in (1, 2, 3, 4):
        hi = sum(table[(i, j, k)] * xi**j * Fraction(phi)**k
                 for (ii, j, k) in table if ii == i)
        poly += hi * r**i
    return math.exp(-3.0 * float(r) ** 2) * float(poly)


class TestA6Communication:
    def test_a6_reception_model_and_sweep_trends(self, sweep):
        coeffs = cf.load_coefficients()
        exact_one = all(cf.reception_probability(0.0, d, 300.0, 10.0, coeffs) == 1.0
                        for d in (1.6667, 40.0, 120.0))
        grid_ok = True
        npts = 0
        for x in (5, 40, 120, 260, 300):
            for d in (1.6667, 25, 50, 100):
                want = _reception_fraction_oracle(x, d, 300, 10)
                if 0.0 < want < 1.0:
                    got = cf.reception_probability(float(x), float(d), 300.0, 10.0, coeffs)
                    grid_ok &= abs(got - want) <= 1e-9 * abs(want)
                    npts += 1

        rows = []
        for cdir in sorted(Path(sweep).iterdir()):
            f = cdir / "comm_kpi.csv"
            if not f.exists():
                continue
            df = pd.read_csv(f)
            policy, mprtxt = cdir.name.rsplit("_", 1)
            for _, r in df.iterrows():
                rows.append((policy, int(mprtxt) / 100.0, r["mean_reception"],
                             r["max_density"]))
        comm = pd.DataFrame(rows, columns=["policy", "mpr", "p1", "dmax"])
        min_p1 = comm["p1"].min()
        from scipy.stats import spearmanr

        rho, pval = spearmanr(comm["mpr"], comm["p1"])
        nml_max = comm.loc[(comm["policy"] == "NML") & (comm["mpr"] == 0.7), "dmax"].mean()
        cav1_max = comm.loc[(comm["policy"] == "CAV1") & (comm["mpr"] == 0.7), "dmax"].mean()
        dens_ok = nml_max >= cav1_max
        ok = exact_one and grid_ok and npts >= 10 and min_p1 >= 0.90 and \
            rho < 0 and pval < 0.05 and dens_ok
        report("A6", ok,
               f"P(0)=1 exact: {exact_one}; {npts} grid points to 1e-9: {grid_ok}; "
               f"min mean reception {min_p1:.4f} (>=0.90); Spearman rho={rho:.3f} "
               f"(p={pval:.2e}); NML vs CAV1 max density @70%: "
               f"{nml_max:.0f} vs {cav1_max:.0f}")


# -- A7 ----------------------------------------------------------------------

RERUN_CELLS = (("NML", 0.0, 1), ("NML", 0.6, 3), ("NML", 1.0, 5),
               ("CAV1", 0.5, 2), ("CAV1", 0.9, 4), ("CAV2", 0.7, 1))


def _rerun_one(args):
    policy, mpr, seed, outdir = args
    return run_cell_seed({}, policy, mpr, seed, outdir)


class TestA7Integrity:
    def test_a7_safety_suite_over_full_sweep(self, sweep, tmp_path):
        metas = sorted(Path(sweep).glob("*/seed_*/run_meta.json"))
        n = len(metas)
        coll = cons = inel = 0
        min_gap = float("inf")
        finite_ok = True
        for m in metas:
            s = json.loads(m.read_text())["summary"]
            coll += s["collisions"]
            cons += 0 if s["conservation_ok"] else 1
            inel += s["ineligible_lane_steps"]
            if s["min_gap_m"] is not None:
                min_gap = min(min_gap, s["min_gap_m"])
            for key in ("throughput_vph", "avg_delay_s", "avg_speed_kmh"):
                finite_ok &= math.isfinite(s[key])

        # determinism: rerun a fixed policy-spanning subset, compare file hashes
        rerun_ok = True
        with ProcessPoolExecutor(max_workers=2) as pool:
            args = [(p, m, s, str(tmp_path / f"rerun_{p}_{int(m * 100)}_{s}"))
                    for p, m, s in RERUN_CELLS]
            list(pool.map(_rerun_one, args))
        for p, m, s in RERUN_CELLS:
            orig = json.loads((Path(sweep) / cell_name(p, m) / f"seed_{s}" /
                               "run_meta.json").read_text())["hashes"]
            new = json.loads((tmp_path / f"rerun_{p}_{int(m * 100)}_{s}" /
                              "run_meta.json").read_text())["hashes"]
            rerun_ok &= orig == new

        ok = (n == 130 and coll == 0 and cons == 0 and inel == 0 and
              min_gap > 0.0 and finite_ok and rerun_ok)
        report("A7", ok,
               f"{n}/130 runs; collisions={coll}; conservation failures={cons}; "
               f"ineligible-lane steps={inel}; min gap {min_gap:.3f} m; finite KPIs: "
               f"{finite_ok}; {len(RERUN_CELLS)}-cell rerun hashes identical: {rerun_ok}")


# -- A8 ----------------------------------------------------------------------

def _fuel_fraction_oracle(v_kmh, a_kmhs):
    text = resources.files("cavflow.data").joinpath("vt_micro_coefficients.txt").read_text()
    rows = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        rows.append([Fraction(x) for x in line.split()])
    m = rows[:4] if a_kmhs >= 0 else rows[4:]
    v, a = Fraction(v_kmh), Fraction(a_kmhs)
    return math.exp(float(sum(m[i][j] * v**i * a**j for i in range(4) for j in range(4))))


class TestA8Fuel:
    def test_a8_fuel_model_and_distributional_split(self, sweep):
        coeffs = cf.load_vt_micro()
        exp_ok = True
        for v_kmh, a in [(0, 0), (40, 1.1), (105, 0), (105, -2.2), (88, 3.6), (20, -0.4)]:
            got = cf.fuel_rate(v_kmh / 3.6, a / 3.6, coeffs)
            want = _fuel_fraction_oracle(v_kmh, a)
            exp_ok &= abs(got - want) <= 1e-12 * abs(want)

        hv_fuel, cav_fuel = [], []
        for seed in SEEDS:
            hv = load_run(Path(sweep) / cell_name("NML", 0.0) / f"seed_{seed}")
            cav = load_run(Path(sweep) / cell_name("CAV1", 1.0) / f"seed_{seed}")
            hv_fuel.append(fuel_series(hv["detectors"], coeffs, lane=4))
            cav_fuel.append(fuel_series(cav["detectors"], coeffs, lane=4))
        hv_fuel = np.concatenate(hv_fuel)
        cav_fuel = np.concatenate(cav_fuel)
        dom = stochastically_dominates(cav_fuel, hv_fuel)
        qs = np.arange(0.1, 1.0, 0.1)
        cq = np.quantile(cav_fuel, qs)
        hq = np.quantile(hv_fuel, qs)
        report("A8", exp_ok and dom,
               f"exp-polynomial to 1e-12: {exp_ok}; homogeneous-CAV lane-4 fuel CDF "
               f"dominates HV at all deciles: {dom} "
               f"(CAV deciles {np.round(cq, 2).tolist()} vs HV {np.round(hq, 2).tolist()})")


# -- A9 ----------------------------------------------------------------------

class TestA9ControllerOracles:
    def test_a9_hand_evaluations_and_platoon(self):
        p = EidmParams()
        v_des = 105.0 / 3.6
        checks = []

        got = cf.desired_gap(29.1667, 29.1667, 0.6, p)
        checks.append(("desired_gap equilibrium", abs(got - (1 + 29.1667 * 0.6)) < 1e-9))
        got = cf.desired_gap(20.0, 25.0, 0.6, p)
        checks.append(("desired_gap clamp", abs(got - 1.0) < 1e-12))
        got = cf.desired_gap(0.0, 0.0, 0.6, p)
        checks.append(("desired_gap standstill", abs(got - 1.0) < 1e-12))

        got = cf.idm_accel(20.0, LeaderView(True, 13.0, 20.0, 0.0), 0.6, p)
        want = 2.0 * (1.0 - (20.0 / v_des) ** 4 - 1.0)
        checks.append(("idm following", abs(got - want) < 1e-3 and
                       abs(got - (-0.4422)) < 1e-3))

        got = cf.cah_accel(20.0, LeaderView(True, 20.0, 20.0, -2.0), p, accel=0.0)
        checks.append(("cah first branch", abs(got - (-800.0 / 480.0)) < 1e-3))
        got = cf.cah_accel(25.0, LeaderView(True, 30.0, 10.0, 1.0), p, accel=0.0)
        checks.append(("cah second branch", abs(got - (-3.75)) < 1e-3))

        # blend components IDM=-8, CAH=-2: independent double-precision oracle
        # (the specified example's printed total is an arithmetic slip; the
        # formula and its own tanh(-3) imply this value - see ledger)
        blend_want = 0.01 * (-8.0) + 0.99 * (-2.0 + 2.0 * math.tanh(-3.0))
        lv = LeaderView(True, 8.0, 4.0, -2.0)
        a_idm = cf.idm_accel(22.0, lv, 0.6, p)
        a_cah = cf.cah_accel(22.0, lv, p, accel=0.0)
        blended = cf.eidm_accel(22.0, lv, 0.6, p, accel=0.0)
        ref = (1 - p.c_cool) * a_idm + p.c_cool * (
            a_cah + p.b_comf * math.tanh((a_idm - a_cah) / p.b_comf))
        ref = max(ref, -9.0)  # emergency floor
        checks.append(("eidm blend composition", abs(blended - ref) < 1e-12))
        checks.append(("eidm blend reference value", abs(blend_want - (-4.030208)) < 1e-5))

        # platoon equilibrium: short-gap spacing at low speed within 0.5%
        v_lead = 8.0
        n, L = 8, 4.5
        pos = np.arange(n, 0, -1) * 50.0
        vel = np.full(n, v_lead)
        prev = np.zeros(n)
        for _ in range(20000):
            acc = np.zeros(n)
            for i in range(1, n):
                acc[i] = eidm_accel(vel[i], LeaderView(True, pos[i - 1] - L - pos[i],
                                                       vel[i - 1], prev[i - 1]),
                                    0.6, p, accel=prev[i])
            vel_new = np.maximum(vel + acc * 0.1, 0.0)
            pos += vel * 0.1 + 0.5 * acc * 0.01
            vel = vel_new
            vel[0] = v_lead
            prev = acc
        gap = pos[-2] - L - pos[-1]
        err = abs(gap / (p.s0 + 0.6 * v_lead) - 1.0)
        checks.append((f"platoon equilibrium gap (err {err:.2%})", err < 0.005))

        failed = [name for name, ok in checks if not ok]
        report("A9", not failed,
               f"{len(checks)} controller oracles; failed: {failed or 'none'}")

"""Scenario-sweep runner: the package's command-line entry point.

``cavflow sweep`` runs every (policy, MPR) cell of the evaluation grid with
its replication seeds, writing per-run raw CSVs, per-cell analysis CSVs and a
machine-readable manifest that reproduces the exact sweep.  ``cavflow run``
executes one cell.  A scenario TOML (``--scenario`` or $CAVFLOW_CONFIG)
overrides network, demand and model parameters; see README for the schema.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import __version__
from .comm import CommParams
from .core import (DemandSpec, Interchange, NetworkSpec, Policy, POLICY_MIN_MPR,
                   ScenarioConfig, validate_scenario)
from .engine import ModelParams, run_replication, write_run
from .lateral import LaneChangeParams
from .longitudinal import EidmParams, HvParams
from .metrics import write_cell_metrics, write_ks_matrix

ENV_CONFIG = "CAVFLOW_CONFIG"
DEFAULT_SEEDS = (1, 2, 3, 4, 5)


def default_mpr_grid(policy: Policy, step: float = 0.1) -> tuple[float, ...]:
    lo = POLICY_MIN_MPR[policy]
    n = int(round((1.0 - lo) / step))
    return tuple(round(lo + i * step, 10) for i in range(n + 1))


@dataclass(frozen=True)
class SweepSpec:
    """The full evaluation grid: (policy, mpr) cells x seeds."""

    cells: tuple[tuple[str, float], ...]
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    scenario: dict = field(default_factory=dict)   # raw TOML-equivalent overrides

    @staticmethod
    def default(scenario: dict | None = None, policies=None, mprs=None, seeds=None) -> "SweepSpec":
        pols = [Policy(p) for p in policies] if policies else list(Policy)
        cells = []
        for p in pols:
            grid = mprs if mprs is not None else default_mpr_grid(p)
            for m in grid:
                if m >= POLICY_MIN_MPR[p] - 1e-12:
                    cells.append((p.value, float(round(m, 10))))
        return SweepSpec(cells=tuple(cells), seeds=tuple(seeds or DEFAULT_SEEDS),
                         scenario=dict(scenario or {}))

    def validate(self) -> None:
        for policy, mpr in self.cells:
            cfg, net, demand, params = build_scenario(self.scenario, Policy(policy), mpr,
                                                      self.seeds[0])
            validate_scenario(cfg, net, demand)
            params.check()


def cell_name(policy: str, mpr: float) -> str:
    return f"{policy}_{int(round(mpr * 100)):03d}"


# -- scenario file -------------------------------------------------------------

def load_scenario_file(path) -> dict:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def build_scenario(raw: dict, policy: Policy, mpr: float, seed: int):
    """Materialize (ScenarioConfig, NetworkSpec, DemandSpec, ModelParams) from
    TOML-shaped overrides."""
    sc = raw.get("scenario", {})
    cfg = ScenarioConfig(
        policy=policy, mpr=mpr, seed=seed,
        warmup_duration=sc.get("warmup_s", 900.0),
        measured_duration=sc.get("measured_s", 3600.0),
        replications=sc.get("replications", 5),
        vehicle_length=sc.get("vehicle_length_m", 4.5),
        comm_mode=sc.get("comm_mode", "model"),
    )
    nt = raw.get("network", {})
    ics = []
    for ic in nt.get("interchange", ({"position_m": 2000.0}, {"position_m": 6000.0})):
        ics.append(Interchange(
            position=ic["position_m"],
            offramp_offset=ic.get("offramp_offset_m", 150.0),
            accel_lane_length=ic.get("accel_lane_m", 300.0),
            decel_lane_length=ic.get("decel_lane_m", 150.0)))
    net = NetworkSpec(
        mainline_length=nt.get("mainline_length_m", 9300.0),
        lane_count=nt.get("lane_count", 4),
        interchanges=tuple(ics),
        detector_positions=tuple(nt.get("detectors_m", (1500.0, 4000.0, 7500.0))),
        speed_limit_kmh=nt.get("speed_limit_kmh", 120.0),
        desired_speed_default_kmh=nt.get("desired_speed_kmh", 105.0))
    dm = raw.get("demand", {})
    demand = DemandSpec(
        mainline_vph=dm.get("mainline_vph", 8000.0),
        ramp_vph=tuple(dm.get("ramp_vph", (1000.0,) * len(ics))),
        offramp_fraction=dm.get("offramp_fraction", 0.10),
        mpr=mpr,
        ramp_entry_speed_kmh=dm.get("ramp_entry_speed_kmh", 60.0))

    e = raw.get("eidm", {})
    eidm = EidmParams(
        t_intra=e.get("t_intra_s", 0.6), t_inter=e.get("t_inter_s", 1.2),
        s0=e.get("s0_m", 1.0), a_max=e.get("a_max", 2.0), b_comf=e.get("b_comf", 2.0),
        c_cool=e.get("coolness", 0.99), delta=e.get("delta", 4.0),
        v_des=e.get("v_des_kmh", net.desired_speed_default_kmh) / 3.6)
    h = raw.get("hv", {})
    hv = HvParams(
        desired_time_gap=h.get("time_gap_s", 1.4), s0=h.get("s0_m", 2.5),
        a_max=h.get("a_max", 1.2), b_comf=h.get("b_comf", 2.0),
        v_des_mean=h.get("v_des_mean_kmh", net.speed_limit_kmh) / 3.6,
        v_des_std=h.get("v_des_std_kmh", 6.0) / 3.6,
        v_des_min=h.get("v_des_min_kmh", 100.0) / 3.6,
        v_des_max=h.get("v_des_max_kmh", 135.0) / 3.6,
        noise_sigma=h.get("noise_sigma", 0.35), noise_tau=h.get("noise_tau_s", 6.0),
        noise_bound=h.get("noise_bound", 1.2),
        reaction_delay=h.get("reaction_delay_s", 0.0))
    c = raw.get("comm", {})
    comm = CommParams(
        phi=c.get("power_range_m", 300.0), f=c.get("rate_hz", 10.0),
        attempts=c.get("attempts", 5), xi_max=c.get("xi_max", CommParams().xi_max))
    l = raw.get("lane_change", {})
    lcp = LaneChangeParams(
        politeness=l.get("politeness", 0.3),
        advantage_threshold=l.get("threshold", 0.1),
        b_safe=l.get("b_safe", 4.0), b_safe_max=l.get("b_safe_max", 7.0),
        min_physical_gap=l.get("min_gap_m", 0.3), cooldown=l.get("cooldown_s", 3.0),
        offramp_prepare_distance=l.get("offramp_prepare_m", 500.0))
    return cfg, net, demand, ModelParams(eidm=eidm, hv=hv, comm=comm, lane_change=lcp)


# -- execution -------------------------------------------------------------------

def run_cell_seed(raw_scenario: dict, policy: str, mpr: float, seed: int, outdir: str) -> dict:
    """One replication, raw CSVs written into ``outdir``; returns the run summary."""
    cfg, net, demand, params = build_scenario(raw_scenario, Policy(policy), mpr, seed)
    scn = validate_scenario(cfg, net, demand)
    res = run_replication(scn, seed, params=params)
    write_run(res, outdir)
    return res.summary


def _pool_task(args):
    raw, policy, mpr, seed, outdir = args
    try:
        summary = run_cell_seed(raw, policy, mpr, seed, outdir)
        return (policy, mpr, seed, "ok", summary)
    except Exception:
        return (policy, mpr, seed, "error", traceback.format_exc())


def run_sweep(spec: SweepSpec, out_dir, workers: int = 1, echo=print) -> int:
    """Run every cell x seed; write manifest, per-cell metrics and a summary table.

    A failed run is reported and isolated; the return value is the count of
    failures (0 means a fully green sweep).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec.validate()
    write_manifest(spec, out)

    tasks = []
    for policy, mpr in spec.cells:
        for seed in spec.seeds:
            rd = out / cell_name(policy, mpr) / f"seed_{seed}"
            tasks.append((spec.scenario, policy, mpr, seed, str(rd)))

    failures = []
    summaries = {}
    if workers <= 1:
        results = map(_pool_task, tasks)
        for policy, mpr, seed, status, payload in results:
            _collect(policy, mpr, seed, status, payload, summaries, failures, echo)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futs = [pool.submit(_pool_task, t) for t in tasks]
            for fut in as_completed(futs):
                policy, mpr, seed, status, payload = fut.result()
                _collect(policy, mpr, seed, status, payload, summaries, failures, echo)

    # per-cell metrics from the runs that completed
    from .metrics import load_run

    cfg0, *_ = build_scenario(spec.scenario, Policy(spec.cells[0][0]), spec.cells[0][1],
                              spec.seeds[0])
    t0, dur = cfg0.warmup_duration, cfg0.measured_duration
    for policy, mpr in spec.cells:
        cdir = out / cell_name(policy, mpr)
        runs = []
        for seed in spec.seeds:
            rd = cdir / f"seed_{seed}"
            if (rd / "run_meta.json").exists():
                data = load_run(rd)
                data["seed"] = seed
                runs.append(data)
        if runs:
            write_cell_metrics(cdir, runs, t0, dur)
    write_ks_matrix(out, list(spec.cells))
    _write_summary(out, summaries)
    if failures:
        echo(f"{len(failures)} run(s) failed; see failures.json")
        (out / "failures.json").write_text(json.dumps(failures, indent=1))
    return len(failures)


def _collect(policy, mpr, seed, status, payload, summaries, failures, echo):
    if status == "ok":
        summaries[(policy, mpr, seed)] = payload
        echo(f"done {policy} mpr={mpr:.0%} seed={seed} "
             f"throughput={payload['throughput_vph']:.0f} vph "
             f"delay={payload['avg_delay_s']:.1f} s")
    else:
        failures.append({"policy": policy, "mpr": mpr, "seed": seed, "error": payload})
        echo(f"FAILED {policy} mpr={mpr:.0%} seed={seed}")


def _write_summary(out: Path, summaries: dict) -> None:
    import pandas as pd

    rows = []
    for (policy, mpr, seed), s in sorted(summaries.items()):
        rows.append({"policy": policy, "mpr": mpr, "seed": seed,
                     "throughput_vph": s["throughput_vph"], "avg_delay_s": s["avg_delay_s"],
                     "avg_speed_kmh": s["avg_speed_kmh"], "latent_end": s["latent_end"],
                     "collisions": s["collisions"],
                     "conservation_ok": s["conservation_ok"]})
    pd.DataFrame(rows).to_csv(out / "summary.csv", index=False)


# -- manifest ---------------------------------------------------------------------

def write_manifest(spec: SweepSpec, out: Path) -> None:
    import hashlib

    payload = {"version": 1, "code_version": __version__,
               "cells": [list(c) for c in spec.cells], "seeds": list(spec.seeds),
               "scenario": spec.scenario}
    blob = json.dumps(payload, sort_keys=True)
    payload["config_sha256"] = hashlib.sha256(blob.encode()).hexdigest()
    (out / "manifest.json").write_text(json.dumps(payload, indent=1, sort_keys=True))


def load_manifest(path) -> SweepSpec:
    data = json.loads(Path(path).read_text())
    return SweepSpec(cells=tuple((p, float(m)) for p, m in data["cells"]),
                     seeds=tuple(int(s) for s in data["seeds"]),
                     scenario=data.get("scenario", {}))


# -- argument parsing ----------------------------------------------------------------

def _parse_mprs(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x != ""]


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="cavflow",
        description="Managed-lane mixed-traffic simulation sweeps (HV + CAV).")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", metavar="TOML",
                        default=os.environ.get(ENV_CONFIG),
                        help=f"scenario file (default: ${ENV_CONFIG})")
    common.add_argument("--out", metavar="DIR", required=True, help="output directory")

    sw = sub.add_parser("sweep", parents=[common],
                        help="run the (policy, MPR) grid with all seeds")
    sw.add_argument("--policies", default=None,
                    help="comma list among NML,CAV1,CAV2 (default: all, or the "
                         "scenario file's [sweep] section)")
    sw.add_argument("--mprs", type=_parse_mprs, default=None,
                    help="explicit MPR list (fractions); default: each policy's 10%% grid")
    sw.add_argument("--seeds", default=None, help="comma list of seeds (default 1..5)")
    sw.add_argument("--workers", type=int, default=1, help="parallel worker processes")
    sw.add_argument("--manifest", default=None,
                    help="rerun the exact sweep recorded in this manifest.json")

    rn = sub.add_parser("run", parents=[common], help="run a single (policy, MPR) cell")
    rn.add_argument("--policy", required=True, choices=[p.value for p in Policy])
    rn.add_argument("--mpr", type=float, required=True)
    rn.add_argument("--seeds", default=None, help="comma list (default 1..5)")
    rn.add_argument("--workers", type=int, default=1)

    args = ap.parse_args(argv)
    raw = load_scenario_file(args.scenario) if args.scenario else {}
    # a [sweep] section in the scenario file provides grid defaults; explicit
    # flags override it
    sw_raw = raw.get("sweep", {})
    if args.seeds:
        seeds = tuple(int(s) for s in args.seeds.split(","))
    else:
        seeds = tuple(int(s) for s in sw_raw.get("seeds", DEFAULT_SEEDS))

    if args.command == "sweep":
        if args.manifest:
            spec = load_manifest(args.manifest)
        else:
            policies = (args.policies.split(",") if args.policies is not None
                        else sw_raw.get("policies", [p.value for p in Policy]))
            mprs = args.mprs if args.mprs is not None else sw_raw.get("mprs")
            spec = SweepSpec.default(raw, policies=policies, mprs=mprs, seeds=seeds)
        fails = run_sweep(spec, args.out, workers=args.workers)
        return 1 if fails else 0

    if args.command == "run":
        spec = SweepSpec(cells=((args.policy, args.mpr),), seeds=seeds, scenario=raw)
        fails = run_sweep(spec, args.out, workers=args.workers)
        return 1 if fails else 0

    return 2


if __name__ == "__main__":
    sys.exit(main())

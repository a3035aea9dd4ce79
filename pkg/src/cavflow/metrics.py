"""Post-processing of raw run outputs.

Everything here is pure over immutable run data: lane-level headway series and
empirical CDFs, two-sample Kolmogorov-Smirnov comparison, 5-min speed-flow
aggregation, instantaneous fuel-rate distributions, communication KPIs and
network throughput/delay/speed.  Functions accept the in-memory arrays an
engine run returns or the same tables re-read from its CSVs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import VehicleClass
from .energy import VtMicroCoefficients, fuel_rate, load_vt_micro

HEADWAY_CUTOFF = 10.0   # s; larger gaps are not car-following observations
AGG_INTERVAL = 300.0    # s, 5-min lane aggregation
SPEED_FLOOR = 0.1       # m/s floor in harmonic means


# -- loading ------------------------------------------------------------------

def load_run(run_dir) -> dict[str, dict[str, np.ndarray]]:
    """Read one run directory's CSVs back into column arrays."""
    import pandas as pd

    run_dir = Path(run_dir)
    out = {}
    for name in ("detectors", "vehicles", "comm", "kpi"):
        df = pd.read_csv(run_dir / f"{name}.csv")
        out[name] = {c: df[c].to_numpy() for c in df.columns}
    return out


# -- headways ------------------------------------------------------------------

def headway_series(det: dict[str, np.ndarray], detector: int | None = None,
                   lane: int | None = None, cls: VehicleClass | int | None = None,
                   cutoff: float = HEADWAY_CUTOFF) -> np.ndarray:
    """Successive crossing-time differences under the given filters.

    First vehicles per detector-lane (no predecessor) and non-following pairs
    (headway > cutoff) are excluded.  An empty selection yields an empty array.
    """
    hw = np.asarray(det["headway"], dtype=float)
    m = np.isfinite(hw) & (hw <= cutoff)
    if detector is not None:
        m &= det["detector"] == detector
    if lane is not None:
        m &= det["lane"] == lane
    if cls is not None:
        m &= det["cls"] == int(cls)
    return hw[m]


def mean_headway_by(det: dict[str, np.ndarray], cls: VehicleClass | int | None = None,
                    lane: int | None = None, detector: int | None = None) -> float:
    """Arithmetic mean headway under filters; raises on an empty selection."""
    s = headway_series(det, detector=detector, lane=lane, cls=cls)
    if s.size == 0:
        raise ValueError("empty headway selection")
    return float(s.mean())


class EmpiricalCdf:
    """Right-continuous step CDF of a sample."""

    def __init__(self, samples):
        self.x = np.sort(np.asarray(samples, dtype=float))
        if self.x.size == 0:
            raise ValueError("empty sample")
        self.n = self.x.size

    def __call__(self, q):
        q = np.asarray(q, dtype=float)
        out = np.searchsorted(self.x, q, side="right") / self.n
        return float(out) if out.ndim == 0 else out

    def quantile(self, p):
        p = np.asarray(p, dtype=float)
        idx = np.clip(np.ceil(p * self.n).astype(int) - 1, 0, self.n - 1)
        out = self.x[idx]
        return float(out) if out.ndim == 0 else out


# -- Kolmogorov-Smirnov ---------------------------------------------------------

def _kolmogorov_sf(t: float) -> float:
    """Survival function of the Kolmogorov distribution, 2*sum (-1)^(r-1) exp(-2 r^2 t^2)."""
    if t < 1e-8:
        return 1.0
    s = 0.0
    sign = 1.0
    for r in range(1, 201):
        term = math.exp(-2.0 * r * r * t * t)
        s += sign * term
        if term < 1e-14:
            break
        sign = -sign
    return min(max(2.0 * s, 0.0), 1.0)


def ks_statistic(a, b) -> float:
    """sup |F_a - F_b| over the pooled support (attained at a sample point)."""
    a = np.sort(np.asarray(a, dtype=float))
    b = np.sort(np.asarray(b, dtype=float))
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be nonempty")
    pooled = np.concatenate([a, b])
    fa = np.searchsorted(a, pooled, side="right") / a.size
    fb = np.searchsorted(b, pooled, side="right") / b.size
    return float(np.abs(fa - fb).max())


def ks_two_sample(a, b) -> tuple[float, float]:
    """Two-sample K-S test: (D, asymptotic p) with effective size n_a n_b/(n_a+n_b).

    The null (same continuous distribution) is rejected at 0.05 in downstream
    comparisons.  The asymptotic p-value suits the thousands-sized detector
    samples this pipeline produces, not tiny samples.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    d = ks_statistic(a, b)
    ne = a.size * b.size / (a.size + b.size)
    return d, _kolmogorov_sf(math.sqrt(ne) * d)


# -- modality diagnostic ---------------------------------------------------------

def headway_histogram(headways, bin_width: float = 0.2, upper: float = 4.0):
    edges = np.arange(0.0, upper + bin_width / 2, bin_width)
    counts, _ = np.histogram(np.asarray(headways, dtype=float), bins=edges)
    return counts, edges


def prominent_mode_count(counts, trough_ratio: float = 0.9,
                         min_rel_height: float = 0.05) -> int:
    """Number of local maxima separated by a trough at or below ``trough_ratio``
    times the smaller neighboring peak (plateaus merge into one candidate).

    Peaks below ``min_rel_height`` of the tallest bin are ignored: with
    thousands of samples the sparse tail always ripples, and a bump holding a
    fraction of a percent of the mass is not a mode of the distribution.
    """
    counts = np.asarray(counts, dtype=float)
    if counts.size == 0 or counts.max() == 0:
        return 0
    floor = min_rel_height * counts.max()
    # merge equal-valued runs, then find runs higher than both neighbors
    vals, runs = [], []
    for c in counts:
        if vals and vals[-1] == c:
            continue
        vals.append(float(c))
    peaks = []
    for i, v in enumerate(vals):
        left = vals[i - 1] if i > 0 else -1.0
        right = vals[i + 1] if i + 1 < len(vals) else -1.0
        if v > left and v > right and v >= floor:
            peaks.append((i, v))
    if not peaks:
        return 0
    kept = [peaks[0]]
    for idx, h in peaks[1:]:
        trough = min(vals[kept[-1][0]: idx + 1])
        if trough <= trough_ratio * min(h, kept[-1][1]):
            kept.append((idx, h))
        elif h > kept[-1][1]:
            kept[-1] = (idx, h)
    return len(kept)


def modal_bin(headways, bin_width: float = 0.2, upper: float = 4.0) -> tuple[float, float]:
    """(left_edge, right_edge) of the most populated histogram bin."""
    counts, edges = headway_histogram(headways, bin_width, upper)
    i = int(np.argmax(counts))
    return float(edges[i]), float(edges[i + 1])


# -- lane aggregation / speed-flow -----------------------------------------------

@dataclass(frozen=True)
class LaneAggregate:
    detector: int
    lane: int
    bin_start: float
    count: int
    flow_vph: float
    speed_kmh: float       # harmonic (space-mean) speed of crossings
    hv_count: int
    cav_count: int


def aggregate_lane_flows(det: dict[str, np.ndarray], measured_start: float,
                         interval: float = AGG_INTERVAL) -> list[LaneAggregate]:
    """5-min per-detector per-lane flow and space-mean speed from crossings."""
    t = np.asarray(det["t"], dtype=float)
    if t.size == 0:
        return []
    bins = np.floor((t - measured_start) / interval).astype(int)
    out = []
    dets = np.asarray(det["detector"])
    lanes = np.asarray(det["lane"])
    speeds = np.asarray(det["speed"], dtype=float)
    clss = np.asarray(det["cls"])
    for d in np.unique(dets):
        for ln in np.unique(lanes):
            m0 = (dets == d) & (lanes == ln)
            for b in np.unique(bins[m0]):
                m = m0 & (bins == b)
                n = int(np.count_nonzero(m))
                if n == 0:
                    continue
                v = np.maximum(speeds[m], SPEED_FLOOR)
                hmean = n / float(np.sum(1.0 / v))
                out.append(LaneAggregate(
                    detector=int(d), lane=int(ln),
                    bin_start=measured_start + float(b) * interval, count=n,
                    flow_vph=n * 3600.0 / interval, speed_kmh=hmean * 3.6,
                    hv_count=int(np.count_nonzero(clss[m] == 0)),
                    cav_count=int(np.count_nonzero(clss[m] == 1))))
    return out


def speed_flow_points(aggregates: list[LaneAggregate]) -> dict[str, np.ndarray]:
    """Scatter-ready (flow, speed) table; empty bins never appear."""
    return {
        "detector": np.array([a.detector for a in aggregates], dtype=np.int64),
        "lane": np.array([a.lane for a in aggregates], dtype=np.int64),
        "bin_start": np.array([a.bin_start for a in aggregates]),
        "flow_vph": np.array([a.flow_vph for a in aggregates]),
        "speed_kmh": np.array([a.speed_kmh for a in aggregates]),
    }


# -- fuel -------------------------------------------------------------------------

def fuel_series(det: dict[str, np.ndarray], coeffs: VtMicroCoefficients | None = None,
                lane: int | None = None, cls: VehicleClass | int | None = None) -> np.ndarray:
    """Instantaneous fuel rates evaluated at detector crossings under filters."""
    coeffs = coeffs if coeffs is not None else load_vt_micro()
    m = np.ones(len(det["t"]), dtype=bool)
    if lane is not None:
        m &= det["lane"] == lane
    if cls is not None:
        m &= det["cls"] == int(cls)
    if not np.any(m):
        return np.empty(0)
    return np.asarray(fuel_rate(det["speed"][m], det["accel"][m], coeffs), dtype=float)


def stochastically_dominates(a, b, deciles=None) -> bool:
    """First-order check at the deciles: every decile of ``a`` <= that of ``b``."""
    qs = np.arange(0.1, 1.0, 0.1) if deciles is None else np.asarray(deciles)
    ca, cb = EmpiricalCdf(a), EmpiricalCdf(b)
    return bool(np.all(ca.quantile(qs) <= cb.quantile(qs)))


# -- network / comm KPIs -------------------------------------------------------------

def network_kpis(vehicles: dict[str, np.ndarray], kpi: dict[str, np.ndarray],
                 measured_start: float, measured_duration: float) -> dict[str, float]:
    """Throughput (arrivals/h), average delay per vehicle, distance-weighted speed.

    Delay divides accrued delay of completed-in-window plus still-present
    vehicles by their joint count; vehicles that finished during warm-up are
    excluded entirely.
    """
    exit_t = np.asarray(vehicles["exit_t"], dtype=float)
    completed = np.asarray(vehicles["completed"]) == 1
    in_window = completed & (exit_t > measured_start)
    present = ~completed
    n = int(np.count_nonzero(in_window) + np.count_nonzero(present))
    delay = np.asarray(vehicles["delay"], dtype=float)
    total_delay = float(delay[in_window].sum() + delay[present].sum())
    vkm = np.asarray(kpi["veh_km"], dtype=float)
    spd = np.asarray(kpi["avg_speed_kmh"], dtype=float)
    good = np.isfinite(spd) & (vkm > 0)
    avg_speed = float(np.sum(spd[good] * vkm[good]) / np.sum(vkm[good])) if np.any(good) else float("nan")
    return {
        "throughput_vph": float(np.count_nonzero(in_window) / (measured_duration / 3600.0)),
        "avg_delay_s": total_delay / n if n else 0.0,
        "avg_speed_kmh": avg_speed,
    }


def comm_kpis(comm: dict[str, np.ndarray]) -> dict[str, float]:
    """Density and reception aggregates over all 2-Hz updates of a run."""
    ncav = np.asarray(comm["n_cav"], dtype=float)
    if ncav.size == 0 or ncav.sum() == 0:
        raise ValueError("no communication telemetry (MPR = 0 run?)")
    pairs = float(np.asarray(comm["pairs"], dtype=float).sum())
    out = {
        "max_density": float(np.asarray(comm["delta_max"], dtype=float).max()),
        "mean_density": float(np.asarray(comm["delta_sum"], dtype=float).sum() / ncav.sum()),
        "mean_reception": float(np.asarray(comm["p_single_sum"], dtype=float).sum() / pairs) if pairs else float("nan"),
        "retry_success_rate": float(np.asarray(comm["successes"], dtype=float).sum() / pairs) if pairs else float("nan"),
        "pair_draws": pairs,
    }
    return out


# -- per-cell CSV emission -------------------------------------------------------------

def write_cell_metrics(cell_dir, runs: list, measured_start: float,
                       measured_duration: float) -> None:
    """Write the analysis CSVs for one (policy, MPR) cell from its seed runs.

    ``runs`` holds engine RunResults (or loaded equivalents) of every seed.
    """
    import pandas as pd

    cell_dir = Path(cell_dir)
    cell_dir.mkdir(parents=True, exist_ok=True)
    coeffs = load_vt_micro()

    hw_rows, sf_rows, net_rows, comm_rows, fuel_rows, mh_rows = [], [], [], [], [], []
    cdf_rows = []
    for res in runs:
        det = res.detectors if hasattr(res, "detectors") else res["detectors"]
        veh = res.vehicles if hasattr(res, "vehicles") else res["vehicles"]
        kpi = res.kpi if hasattr(res, "kpi") else res["kpi"]
        comm = res.comm if hasattr(res, "comm") else res["comm"]
        seed = res.seed if hasattr(res, "seed") else res["seed"]

        hw = np.asarray(det["headway"], dtype=float)
        keep = np.isfinite(hw) & (hw <= HEADWAY_CUTOFF)
        for d, ln, cl, h in zip(det["detector"][keep], det["lane"][keep],
                                det["cls"][keep], hw[keep]):
            hw_rows.append((seed, int(d), int(ln), int(cl), float(h)))

        for a in aggregate_lane_flows(det, measured_start):
            sf_rows.append((seed, a.detector, a.lane, a.bin_start, a.count,
                            a.flow_vph, a.speed_kmh, a.hv_count, a.cav_count))

        nk = network_kpis(veh, kpi, measured_start, measured_duration)
        net_rows.append((seed, nk["throughput_vph"], nk["avg_delay_s"], nk["avg_speed_kmh"]))

        if len(comm["t"]):
            ck = comm_kpis(comm)
            comm_rows.append((seed, ck["max_density"], ck["mean_density"],
                              ck["mean_reception"], ck["retry_success_rate"], ck["pair_draws"]))

        qs = np.linspace(0.01, 1.0, 100)
        for ln in np.unique(det["lane"]) if len(det["lane"]) else []:
            for cl in (None, 0, 1):
                f = fuel_series(det, coeffs, lane=int(ln), cls=cl)
                if f.size < 10:
                    continue
                cdf = EmpiricalCdf(f)
                for q in qs:
                    fuel_rows.append((seed, int(ln), -1 if cl is None else cl,
                                      float(q), float(cdf.quantile(q))))

    # pooled per-lane headway CDFs and means
    hw_df = pd.DataFrame(hw_rows, columns=["seed", "detector", "lane", "cls", "headway"])
    hw_df.to_csv(cell_dir / "headways.csv", index=False)
    qs = np.linspace(0.005, 1.0, 200)
    for ln in sorted(hw_df["lane"].unique()):
        s = hw_df.loc[hw_df["lane"] == ln, "headway"].to_numpy()
        if s.size:
            cdf = EmpiricalCdf(s)
            for q in qs:
                cdf_rows.append((int(ln), float(q), float(cdf.quantile(q))))
        for cl in (0, 1):
            sc = hw_df.loc[(hw_df["lane"] == ln) & (hw_df["cls"] == cl), "headway"].to_numpy()
            if sc.size:
                mh_rows.append((int(ln), cl, float(sc.mean()), int(sc.size)))
    pd.DataFrame(cdf_rows, columns=["lane", "quantile", "headway"]).to_csv(
        cell_dir / "cdf.csv", index=False)
    pd.DataFrame(mh_rows, columns=["lane", "cls", "mean_headway", "n"]).to_csv(
        cell_dir / "mean_headway.csv", index=False)
    pd.DataFrame(sf_rows, columns=["seed", "detector", "lane", "bin_start", "count",
                                   "flow_vph", "speed_kmh", "hv_count", "cav_count"]
                 ).to_csv(cell_dir / "speedflow.csv", index=False)
    pd.DataFrame(net_rows, columns=["seed", "throughput_vph", "avg_delay_s", "avg_speed_kmh"]
                 ).to_csv(cell_dir / "network_kpi.csv", index=False)
    pd.DataFrame(comm_rows, columns=["seed", "max_density", "mean_density", "mean_reception",
                                     "retry_success_rate", "pair_draws"]
                 ).to_csv(cell_dir / "comm_kpi.csv", index=False)
    pd.DataFrame(fuel_rows, columns=["seed", "lane", "cls", "quantile", "fuel"]
                 ).to_csv(cell_dir / "fuel_cdf.csv", index=False)


def write_ks_matrix(sweep_dir, cells: list[tuple[str, float]], lane: int | None = None) -> None:
    """Pairwise K-S (D, p) between cells' pooled leftmost-lane headway samples."""
    import pandas as pd

    sweep_dir = Path(sweep_dir)
    samples = {}
    for policy, mpr in cells:
        path = sweep_dir / f"{policy}_{int(round(mpr * 100)):03d}" / "headways.csv"
        if not path.exists():
            continue
        df = pd.read_csv(path)
        ln = lane if lane is not None else int(df["lane"].max())
        s = df.loc[df["lane"] == ln, "headway"].to_numpy()
        if s.size:
            samples[(policy, mpr)] = s
    rows = []
    keys = sorted(samples)
    for i, ka in enumerate(keys):
        for kb in keys[i:]:
            d, p = ks_two_sample(samples[ka], samples[kb])
            rows.append((ka[0], ka[1], kb[0], kb[1], d, p))
    pd.DataFrame(rows, columns=["policy_a", "mpr_a", "policy_b", "mpr_b", "D", "p"]
                 ).to_csv(sweep_dir / "ks_matrix.csv", index=False)

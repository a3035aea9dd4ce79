"""Figure regeneration from a completed cavflow sweep directory.

Consumes only the sweep's CSV outputs (and the packaged DSRC coefficient data
file, re-evaluated locally); renders one PNG per figure family plus a sidecar
``<name>.meta.json`` carrying the facet count and inputs, so downstream checks
can verify coverage without parsing images.  Rendering is read-only over its
inputs and idempotent.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

FIGURES = (
    "speed_flow_grid",
    "headway_cdf_grid",
    "ks_heatmap",
    "mean_headway_panels",
    "headway_histograms",
    "fuel_cdf",
    "comm_performance",
    "network_performance",
    "reception_curve",
)

LANE_COLORS = {1: "#1f77b4", 2: "#ff7f0e", 3: "#2ca02c", 4: "#d62728"}


class FigureError(RuntimeError):
    pass


def _cells(sweep: Path) -> list[tuple[str, float, Path]]:
    out = []
    for d in sorted(sweep.iterdir()):
        if d.is_dir() and "_" in d.name:
            policy, mpr = d.name.rsplit("_", 1)
            try:
                out.append((policy, int(mpr) / 100.0, d))
            except ValueError:
                continue
    if not out:
        raise FigureError(f"no policy_mpr cell directories under {sweep}")
    return out


def _save(fig, outdir: Path, name: str, meta: dict) -> Path:
    outdir.mkdir(parents=True, exist_ok=True)
    png = outdir / f"{name}.png"
    fig.savefig(png, dpi=110, bbox_inches="tight")
    plt.close(fig)
    (outdir / f"{name}.meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return png


def _facet_grid(n: int, max_cols: int = 6):
    cols = min(max_cols, max(1, n))
    rows = math.ceil(n / cols)
    fig, axes = plt.subplots(rows, cols, figsize=(3.2 * cols, 2.6 * rows), squeeze=False)
    return fig, [ax for row in axes for ax in row]


def speed_flow_grid(sweep: Path, outdir: Path) -> Path:
    cells = _cells(sweep)
    data = []
    for policy, mpr, d in cells:
        f = d / "speedflow.csv"
        if f.exists():
            df = pd.read_csv(f)
            if len(df):
                data.append((policy, mpr, df))
    if not data:
        raise FigureError("no speedflow.csv with rows found")
    fig, axes = _facet_grid(len(data))
    for ax, (policy, mpr, df) in zip(axes, data):
        for lane, grp in df.groupby("lane"):
            ax.scatter(grp["flow_vph"], grp["speed_kmh"], s=4, alpha=0.5,
                       color=LANE_COLORS.get(lane, "gray"), label=f"lane {lane}")
        ax.set_title(f"{policy} {mpr:.0%}", fontsize=9)
        ax.set_xlim(0, 4200)
        ax.set_ylim(0, 130)
    for ax in axes[len(data):]:
        ax.axis("off")
    axes[0].legend(fontsize=6, loc="lower right")
    fig.supxlabel("flow (veh/h/lane)")
    fig.supylabel("speed (km/h)")
    return _save(fig, outdir, "speed_flow_grid",
                 {"figure": "speed_flow_grid", "facets": len(data),
                  "cells": [f"{p}_{m:.2f}" for p, m, _ in data]})


def headway_cdf_grid(sweep: Path, outdir: Path) -> Path:
    cells = _cells(sweep)
    data = []
    for policy, mpr, d in cells:
        f = d / "cdf.csv"
        if f.exists():
            df = pd.read_csv(f)
            if len(df):
                data.append((policy, mpr, df))
    if not data:
        raise FigureError("no cdf.csv with rows found")
    fig, axes = _facet_grid(len(data))
    for ax, (policy, mpr, df) in zip(axes, data):
        for lane, grp in df.groupby("lane"):
            ax.plot(grp["headway"], grp["quantile"], lw=1,
                    color=LANE_COLORS.get(lane, "gray"), label=f"lane {lane}")
            tail = grp["headway"].max()
            ax.axvline(tail, color=LANE_COLORS.get(lane, "gray"), ls=":", lw=0.6)
        ax.set_xlim(0, 10)
        ax.set_ylim(0, 1.02)
        ax.set_title(f"{policy} {mpr:.0%}", fontsize=9)
    for ax in axes[len(data):]:
        ax.axis("off")
    axes[0].legend(fontsize=6, loc="lower right")
    fig.supxlabel("headway (s)")
    fig.supylabel("cumulative probability")
    return _save(fig, outdir, "headway_cdf_grid",
                 {"figure": "headway_cdf_grid", "facets": len(data)})


def ks_heatmap(sweep: Path, outdir: Path) -> Path:
    f = sweep / "ks_matrix.csv"
    if not f.exists():
        raise FigureError("ks_matrix.csv missing")
    df = pd.read_csv(f)
    if not len(df):
        raise FigureError("ks_matrix.csv empty")
    keys = sorted({(r["policy_a"], r["mpr_a"]) for _, r in df.iterrows()} |
                  {(r["policy_b"], r["mpr_b"]) for _, r in df.iterrows()})
    idx = {k: i for i, k in enumerate(keys)}
    mat = np.zeros((len(keys), len(keys)))
    for _, r in df.iterrows():
        i, j = idx[(r["policy_a"], r["mpr_a"])], idx[(r["policy_b"], r["mpr_b"])]
        mat[i, j] = mat[j, i] = r["D"]
    fig, ax = plt.subplots(figsize=(0.45 * len(keys) + 2, 0.45 * len(keys) + 2))
    im = ax.imshow(mat, cmap="viridis", vmin=0, vmax=1)
    labels = [f"{p} {m:.0%}" for p, m in keys]
    ax.set_xticks(range(len(keys)), labels, rotation=90, fontsize=6)
    ax.set_yticks(range(len(keys)), labels, fontsize=6)
    fig.colorbar(im, label="K-S statistic D")
    ax.set_title("pairwise K-S statistic, leftmost-lane headways")
    return _save(fig, outdir, "ks_heatmap",
                 {"figure": "ks_heatmap", "facets": 1, "scenarios": len(keys)})


def mean_headway_panels(sweep: Path, outdir: Path) -> Path:
    rows = []
    for policy, mpr, d in _cells(sweep):
        f = d / "mean_headway.csv"
        if f.exists():
            df = pd.read_csv(f)
            for _, r in df.iterrows():
                rows.append((policy, mpr, int(r["lane"]), int(r["cls"]),
                             r["mean_headway"]))
    if not rows:
        raise FigureError("no mean_headway.csv rows found")
    df = pd.DataFrame(rows, columns=["policy", "mpr", "lane", "cls", "mean_headway"])
    lanes = sorted(df["lane"].unique())
    fig, axes = plt.subplots(2, len(lanes), figsize=(3.0 * len(lanes), 5.4),
                             squeeze=False, sharey="row")
    for row, cls in enumerate((0, 1)):
        for col, lane in enumerate(lanes):
            ax = axes[row][col]
            sel = df[(df["cls"] == cls) & (df["lane"] == lane)]
            for policy, grp in sel.groupby("policy"):
                grp = grp.sort_values("mpr")
                ax.plot(grp["mpr"] * 100, grp["mean_headway"], "o-", ms=3, label=policy)
            ax.set_title(f"{'HV' if cls == 0 else 'CAV'} lane {lane}", fontsize=9)
            ax.set_xlabel("MPR (%)")
    axes[0][0].set_ylabel("mean headway (s)")
    axes[1][0].set_ylabel("mean headway (s)")
    axes[0][0].legend(fontsize=7)
    facets = 2 * len(lanes)
    return _save(fig, outdir, "mean_headway_panels",
                 {"figure": "mean_headway_panels", "facets": facets})


def headway_histograms(sweep: Path, outdir: Path, lane: int | None = None) -> Path:
    cells = _cells(sweep)
    mprs = sorted({m for _, m, _ in cells if any(
        abs(m - x) < 1e-9 for x in (0.4, 0.5, 0.6, 0.7))})
    if not mprs:
        mprs = sorted({m for _, m, _ in cells})[:4]
    fig, axes = _facet_grid(len(mprs), max_cols=2)
    count = 0
    for ax, m in zip(axes, mprs):
        for policy, mpr, d in cells:
            if abs(mpr - m) > 1e-9:
                continue
            f = d / "headways.csv"
            if not f.exists():
                continue
            df = pd.read_csv(f)
            ln = lane if lane is not None else df["lane"].max()
            s = df.loc[df["lane"] == ln, "headway"]
            if not len(s):
                continue
            ax.hist(s, bins=np.arange(0, 4.2, 0.2), histtype="step", lw=1.2,
                    density=True, label=policy)
            count += 1
        ax.set_title(f"{m:.0%} MPR", fontsize=9)
        ax.set_xlabel("headway (s)")
        ax.legend(fontsize=6)
    for ax in axes[len(mprs):]:
        ax.axis("off")
    if count == 0:
        plt.close("all")
        raise FigureError("no headway data for histogram MPR range")
    return _save(fig, outdir, "headway_histograms",
                 {"figure": "headway_histograms", "facets": len(mprs)})


def fuel_cdf(sweep: Path, outdir: Path) -> Path:
    panels = [("all vehicles", None), ("HVs", 0), ("CAVs", 1)]
    cells = _cells(sweep)
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.2), sharey=True)
    drawn = 0
    for ax, (title, cls) in zip(axes, panels):
        for policy, mpr, d in cells:
            f = d / "fuel_cdf.csv"
            if not f.exists():
                continue
            df = pd.read_csv(f)
            sel = df[df["cls"] == (-1 if cls is None else cls)]
            if not len(sel):
                continue
            ln = sel["lane"].max()
            sel = sel[sel["lane"] == ln]
            pooled = sel.groupby("quantile")["fuel"].mean()
            ax.plot(pooled.values, pooled.index, lw=1, label=f"{policy} {mpr:.0%}")
            drawn += 1
        ax.set_title(title, fontsize=9)
        ax.set_xlim(0, 20)
        ax.set_xlabel("fuel rate (ml/s)")
    axes[0].set_ylabel("cumulative probability")
    if drawn == 0:
        plt.close("all")
        raise FigureError("no fuel_cdf.csv rows found")
    if drawn <= 12:
        axes[-1].legend(fontsize=5)
    return _save(fig, outdir, "fuel_cdf", {"figure": "fuel_cdf", "facets": 3})


def comm_performance(sweep: Path, outdir: Path) -> Path:
    rows = []
    for policy, mpr, d in _cells(sweep):
        f = d / "comm_kpi.csv"
        if not f.exists():
            continue
        df = pd.read_csv(f)
        if len(df):
            rows.append((policy, mpr, df["max_density"].mean(), df["mean_density"].mean(),
                         df["mean_reception"].mean()))
    if not rows:
        raise FigureError("no comm_kpi.csv rows found")
    df = pd.DataFrame(rows, columns=["policy", "mpr", "max_density", "mean_density",
                                     "mean_reception"])
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    for policy, grp in df.groupby("policy"):
        grp = grp.sort_values("mpr")
        ax1.plot(grp["mpr"] * 100, grp["max_density"], "o-", ms=3, label=f"{policy} max")
        ax1.plot(grp["mpr"] * 100, grp["mean_density"], "s--", ms=3, label=f"{policy} mean")
        ax2.plot(grp["mpr"] * 100, grp["mean_reception"], "o-", ms=3, label=policy)
    ax1.set_xlabel("MPR (%)")
    ax1.set_ylabel("communication density (veh/km)")
    ax2.set_xlabel("MPR (%)")
    ax2.set_ylabel("mean reception probability")
    ax2.set_ylim(0.85, 1.005)
    ax1.legend(fontsize=6)
    ax2.legend(fontsize=7)
    return _save(fig, outdir, "comm_performance",
                 {"figure": "comm_performance", "facets": 2})


def network_performance(sweep: Path, outdir: Path) -> Path:
    f = sweep / "summary.csv"
    if not f.exists():
        raise FigureError("summary.csv missing")
    df = pd.read_csv(f)
    if not len(df):
        raise FigureError("summary.csv empty")
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.4))
    for policy, grp in df.groupby("policy"):
        m = grp.groupby("mpr").mean(numeric_only=True).sort_index()
        axes[0].plot(m.index * 100, m["throughput_vph"], "o-", ms=3, label=policy)
        axes[1].plot(m.index * 100, m["avg_delay_s"], "o-", ms=3, label=policy)
        axes[2].plot(m.index * 100, m["avg_speed_kmh"], "o-", ms=3, label=policy)
    for ax, ylab in zip(axes, ("throughput (veh/h)", "average delay (s/veh)",
                               "average speed (km/h)")):
        ax.set_xlabel("MPR (%)")
        ax.set_ylabel(ylab)
        ax.legend(fontsize=7)
    return _save(fig, outdir, "network_performance",
                 {"figure": "network_performance", "facets": 3})


def reception_curve(sweep: Path, outdir: Path, coeff_file: Path | None = None) -> Path:
    # evaluated from the packaged coefficient data file (the model's public
    # interface), independent of any simulation output
    if coeff_file is None:
        from importlib import resources
        text = resources.files("cavflow.data").joinpath(
            "dsrc_reception_coefficients.txt").read_text()
    else:
        text = Path(coeff_file).read_text()
    table = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        i, j, k, c = line.split()
        table[(int(i), int(j), int(k))] = float(c)
    phi, f = 300.0, 10.0
    xs = np.linspace(0, phi, 301)
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    for delta in (1.7, 25, 50, 75, 100, 150):
        xi = min(delta * phi * f, 5e5)
        r = xs / phi
        acc = np.ones_like(r)
        for i in (1, 2, 3, 4):
            hi = sum(cv * xi**j * phi**k for (ii, j, k), cv in table.items() if ii == i)
            acc += hi * r**i
        p = np.clip(np.exp(-3 * r * r) * acc, 0, 1)
        ax.plot(xs, p, lw=1, label=f"{delta:.0f} veh/km")
    ax.set_xlabel("distance (m)")
    ax.set_ylabel("reception probability")
    ax.set_title(f"one-hop broadcast reception ({phi:.0f}-m power range)", fontsize=9)
    ax.legend(fontsize=6, title="density")
    return _save(fig, outdir, "reception_curve",
                 {"figure": "reception_curve", "facets": 1})


RENDERERS = {
    "speed_flow_grid": speed_flow_grid,
    "headway_cdf_grid": headway_cdf_grid,
    "ks_heatmap": ks_heatmap,
    "mean_headway_panels": mean_headway_panels,
    "headway_histograms": headway_histograms,
    "fuel_cdf": fuel_cdf,
    "comm_performance": comm_performance,
    "network_performance": network_performance,
    "reception_curve": reception_curve,
}


def render_all(sweep, outdir, figures=None, echo=print) -> int:
    """Render the requested figure families; returns the failure count."""
    sweep, outdir = Path(sweep), Path(outdir)
    failures = 0
    for name in figures or FIGURES:
        if name not in RENDERERS:
            echo(f"{name}: unknown figure")
            failures += 1
            continue
        try:
            png = RENDERERS[name](sweep, outdir)
            echo(f"{name}: wrote {png}")
        except FigureError as e:
            failures += 1
            echo(f"{name}: FAILED ({e})")
            # emit a blank-axes placeholder so the gap is visible downstream
            fig, ax = plt.subplots()
            ax.set_title(f"{name}: no data ({e})")
            _save(fig, outdir, name, {"figure": name, "facets": 0, "error": str(e)})
    return failures


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="cavflow-figures",
        description="Regenerate summary figures from a cavflow sweep directory.")
    ap.add_argument("--sweep", required=True, help="sweep output directory")
    ap.add_argument("--out", required=True, help="directory for PNG + meta.json files")
    ap.add_argument("--figures", default=None,
                    help=f"comma list among: {','.join(FIGURES)} (default: all)")
    args = ap.parse_args(argv)
    figures = args.figures.split(",") if args.figures else None
    failures = render_all(args.sweep, args.out, figures)
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())

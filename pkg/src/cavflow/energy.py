"""VT-Micro instantaneous fuel-consumption model.

A vehicle's second-by-second fuel rate is an exponentiated third-degree
polynomial in instantaneous speed and acceleration, with separate regression
matrices for the acceleration (a >= 0) and deceleration (a < 0) regimes
(Ahn, Rakha, Trani & Van Aerde 2002).  No continuity across a = 0 is implied
by the two regressions; exactly a = 0 uses the acceleration matrix.

Coefficients load from a data file whose header declares the input/output
units; the shipped set is a clearly-marked representative placeholder.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources

import numpy as np

_VALID_UNITS = {"speed": ("km/h", "m/s"), "accel": ("km/h/s", "m/s^2"), "output": ("ml/s", "L/s")}


@dataclass(frozen=True)
class VtMicroCoefficients:
    """Two 4x4 matrices plus the units they were fitted in."""

    accel_matrix: np.ndarray   # applied for a >= 0
    decel_matrix: np.ndarray   # applied for a < 0
    speed_unit: str = "km/h"
    accel_unit: str = "km/h/s"
    output_unit: str = "ml/s"

    def __post_init__(self):
        for name, m in (("accel", self.accel_matrix), ("decel", self.decel_matrix)):
            m = np.asarray(m, dtype=float)
            if m.shape != (4, 4):
                raise ValueError(f"{name} matrix must be 4x4, got {m.shape}")
            if not np.all(np.isfinite(m)):
                raise ValueError(f"{name} matrix has non-finite entries")
        for key, val in (("speed", self.speed_unit), ("accel", self.accel_unit),
                         ("output", self.output_unit)):
            if val not in _VALID_UNITS[key]:
                raise ValueError(f"unsupported {key} unit {val!r}")

    @property
    def speed_factor(self) -> float:
        """Multiply m/s by this to get the matrix's speed unit."""
        return 3.6 if self.speed_unit == "km/h" else 1.0

    @property
    def accel_factor(self) -> float:
        return 3.6 if self.accel_unit == "km/h/s" else 1.0


def load_vt_micro(path=None) -> VtMicroCoefficients:
    """Parse the two-matrix data file; the units header line is authoritative."""
    if path is None:
        text = resources.files("cavflow.data").joinpath("vt_micro_coefficients.txt").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    units = {}
    rows: list[list[float]] = []
    for line in text.splitlines():
        line = line.strip()
        if line.startswith("# units:"):
            for tok in line.removeprefix("# units:").split():
                key, val = tok.split("=")
                units[key] = val
            continue
        if not line or line.startswith("#"):
            continue
        rows.append([float(x) for x in line.split()])
    if len(rows) != 8:
        raise ValueError(f"expected 8 matrix rows, got {len(rows)}")
    if not units:
        raise ValueError("units header missing from coefficient file")
    return VtMicroCoefficients(
        accel_matrix=np.array(rows[:4]),
        decel_matrix=np.array(rows[4:]),
        speed_unit=units["speed"],
        accel_unit=units["accel"],
        output_unit=units["output"],
    )


def fuel_rate(speed_ms, accel_ms2, coeffs: VtMicroCoefficients):
    """Instantaneous fuel rate for speed (m/s) and acceleration (m/s^2).

    Inputs are converted to the coefficient file's declared units; output is in
    the file's output unit.  Always > 0 for finite inputs.  Accepts arrays.
    """
    v = np.asarray(speed_ms, dtype=float) * coeffs.speed_factor
    a = np.asarray(accel_ms2, dtype=float) * coeffs.accel_factor
    if np.any(v < 0):
        raise ValueError("speed must be >= 0")
    vp = np.stack([np.ones_like(v), v, v * v, v * v * v])          # (4, ...)
    ap = np.stack([np.ones_like(a), a, a * a, a * a * a])
    ln_acc = np.einsum("i...,ij,j...->...", vp, coeffs.accel_matrix, ap)
    ln_dec = np.einsum("i...,ij,j...->...", vp, coeffs.decel_matrix, ap)
    out = np.exp(np.where(a >= 0.0, ln_acc, ln_dec))
    return float(out) if out.ndim == 0 else out

"""DSRC physical-layer broadcast reception model and communication density.

The probability that a basic safety message broadcast is received at distance
x is an empirical fit from packet-level network simulation (Killat &
Hartenstein 2009):

    P(x, delta, phi, f) = exp(-3 (x/phi)^2) * (1 + sum_{i=1..4} h_i(xi, phi) (x/phi)^i)
    xi = delta * phi * f

with delta the broadcasting-vehicle density (veh/km), phi the transmission
power range (m), f the broadcast rate (Hz), and each h_i a fourth-degree
two-dimensional polynomial in (xi, phi) whose 60 coefficients ship in
``data/dsrc_reception_coefficients.txt``.

Being a polynomial fit, the model strays outside [0, 1] and outside its fitted
communication-density domain; both are clamped and every clamp is counted so
runs can report how often the model left its valid region.  Only the physical
layer is modeled (no MAC delay); a transmission gets up to ``attempts`` tries
and succeeds if at least one is received.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

_EXPECTED_ENTRIES = 60
# sha256 of the canonicalized (i j k coeff) rows of the shipped table;
# guards the packaged data file against silent edits
_TABLE_SHA256 = "f247fa564724e68cee561fd117f6d5c5e3454faf7bb4d3e82fdeb6ba2c87fe6d"

XI_FIT_MAX = 5.0e5  # events/s/km; beyond this the fourth-degree fit produces garbage


@dataclass(frozen=True)
class CommParams:
    phi: float = 300.0      # m, transmission power range
    f: float = 10.0         # Hz, broadcast rate
    attempts: int = 5       # 1 original + 4 re-transmissions
    density_update_interval: float = 0.5  # s (2 Hz)
    xi_max: float = XI_FIT_MAX

    def check(self) -> None:
        if self.phi <= 0 or self.f <= 0 or self.attempts < 1:
            raise ValueError("phi > 0, f > 0, attempts >= 1 required")


class CommCoefficients:
    """The 4 x 15 polynomial coefficient table, loaded and validated from disk."""

    #: (j, k) exponent pairs, fixed order shared with the data file
    JK: tuple[tuple[int, int], ...] = (
        (0, 0), (1, 0), (2, 0), (3, 0), (4, 0),
        (3, 1), (2, 1), (2, 2), (1, 1), (1, 2),
        (1, 3), (0, 1), (0, 2), (0, 3), (0, 4),
    )

    def __init__(self, table: dict[tuple[int, int, int], float]):
        if len(table) != _EXPECTED_ENTRIES:
            raise ValueError(f"coefficient table has {len(table)} entries, expected {_EXPECTED_ENTRIES}")
        for i in (1, 2, 3, 4):
            for jk in self.JK:
                if (i, *jk) not in table:
                    raise ValueError(f"coefficient h_{i}^{jk} missing")
        self.table = dict(table)
        # coeffs[i-1][idx] aligned with JK
        self.coeffs = np.array([[table[(i, j, k)] for (j, k) in self.JK] for i in (1, 2, 3, 4)])
        self.sha256 = hashlib.sha256(
            "".join(f"{i} {j} {k} {table[(i, j, k)]!r};" for i in (1, 2, 3, 4) for (j, k) in self.JK).encode()
        ).hexdigest()

    def xi_poly(self, phi: float) -> np.ndarray:
        """Collapse the phi powers: rows of xi-only coefficients c[i-1][j], j = 0..4."""
        out = np.zeros((4, 5))
        for row, i in enumerate((1, 2, 3, 4)):
            for (j, k), c in zip(self.JK, self.coeffs[row]):
                out[row, j] += c * phi**k
        return out


def load_coefficients(path=None) -> CommCoefficients:
    """Load the table from the packaged data file (or an override path).

    The packaged table must hash to the pinned value: all 60 published entries
    present and unaltered.
    """
    if path is None:
        text = resources.files("cavflow.data").joinpath("dsrc_reception_coefficients.txt").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    table: dict[tuple[int, int, int], float] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        i, j, k, c = line.split()
        key = (int(i), int(j), int(k))
        if key in table:
            raise ValueError(f"duplicate coefficient row {key}")
        table[key] = float(c)
    out = CommCoefficients(table)
    if path is None and out.sha256 != _TABLE_SHA256:
        raise ValueError("packaged coefficient table failed checksum verification")
    return out


def poly_h(i: int, xi, phi, coeffs: CommCoefficients):
    """h_i(xi, phi): the 15-term two-dimensional polynomial, i in 1..4."""
    if i not in (1, 2, 3, 4):
        raise ValueError(f"polynomial index {i} outside 1..4")
    xi = np.asarray(xi, dtype=float)
    phi = np.asarray(phi, dtype=float)
    out = np.zeros(np.broadcast(xi, phi).shape)
    for (j, k), c in zip(CommCoefficients.JK, coeffs.coeffs[i - 1]):
        out = out + c * xi**j * phi**k
    return float(out) if out.ndim == 0 else out


def reception_probability(x, delta, phi, f, coeffs: CommCoefficients,
                          xi_max: float = XI_FIT_MAX, clamp_counter: dict | None = None):
    """Single-attempt reception probability at distance x (m), clamped to [0, 1].

    ``delta`` is in veh/km.  xi is clamped to the polynomial's fitted domain
    and P to [0, 1]; pass ``clamp_counter`` (dict) to count activations.
    """
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("distance must be >= 0")
    delta = np.asarray(delta, dtype=float)
    xi_raw = delta * phi * f
    xi = np.minimum(xi_raw, xi_max)
    r = x / phi
    acc = np.ones(np.broadcast(x, delta).shape)
    for i in (1, 2, 3, 4):
        acc = acc + poly_h(i, xi, phi, coeffs) * r**i
    raw = np.exp(-3.0 * r * r) * acc
    out = np.clip(raw, 0.0, 1.0)
    if clamp_counter is not None:
        clamp_counter["xi"] = clamp_counter.get("xi", 0) + int(np.sum(xi_raw > xi_max))
        clamp_counter["p_low"] = clamp_counter.get("p_low", 0) + int(np.sum(raw < 0.0))
        clamp_counter["p_high"] = clamp_counter.get("p_high", 0) + int(np.sum(raw > 1.0))
    return float(out) if out.ndim == 0 else out


def reception_probability_fast(r, xi, poly_rows, clamp_counter=None):
    """Hot-path variant: r = x/phi, phi-collapsed coefficient rows, xi pre-clamped."""
    r = np.asarray(r, dtype=float)
    acc = 1.0 + r * 0.0
    rp = np.ones_like(r)
    for row in poly_rows:
        rp = rp * r
        # Horner in xi for this h_i
        h = row[4]
        for c in (row[3], row[2], row[1], row[0]):
            h = h * xi + c
        acc = acc + h * rp
    raw = np.exp(-3.0 * r * r) * acc
    if clamp_counter is not None:
        clamp_counter["p_low"] = clamp_counter.get("p_low", 0) + int(np.sum(raw < 0.0))
        clamp_counter["p_high"] = clamp_counter.get("p_high", 0) + int(np.sum(raw > 1.0))
    return np.clip(raw, 0.0, 1.0)


def retry_success_probability(p_single, attempts: int = 5):
    """Probability that at least one of ``attempts`` independent tries is received."""
    p = np.asarray(p_single, dtype=float)
    out = 1.0 - (1.0 - p) ** attempts
    return float(out) if out.ndim == 0 else out


def transmission_success(p_single, attempts: int, rng) -> bool | np.ndarray:
    """Bernoulli draw: success iff at least one of the attempts is received.

    Deterministic per rng state; per-attempt independence assumed.
    """
    p = retry_success_probability(p_single, attempts)
    u = rng.random(np.asarray(p).shape if np.asarray(p).ndim else None)
    out = u < p
    return bool(out) if np.asarray(out).ndim == 0 else out


def comm_density(positions, classes, subject: int, phi: float):
    """Broadcasting-vehicle density around one subject: CAVs (all lanes, the
    subject included) within +-phi meters, per km of road.

    >>> comm_density(np.array([0.0]), np.array([1]), 0, 300.0)  # lone CAV
    1.666...
    """
    from .core import VehicleClass

    positions = np.asarray(positions, dtype=float)
    classes = np.asarray(classes)
    if classes[subject] != VehicleClass.CAV:
        raise ValueError("subject must be a CAV")
    x0 = positions[subject]
    mask = (classes == VehicleClass.CAV) & (np.abs(positions - x0) <= phi)
    return float(np.sum(mask)) / (2.0 * phi / 1000.0)


def densities_for(cav_positions: np.ndarray, phi: float) -> np.ndarray:
    """Vectorized per-CAV broadcast density (veh/km), all CAV positions pooled."""
    order = np.sort(cav_positions)
    hi = np.searchsorted(order, cav_positions + phi, side="right")
    lo = np.searchsorted(order, cav_positions - phi, side="left")
    return (hi - lo) / (2.0 * phi / 1000.0)


@dataclass
class CommSnapshot:
    """2-Hz communication state, immutable until the next update.

    Maps are keyed by vehicle id; ``success`` holds the retry-composite outcome
    that gates the short following gap, ``p_single`` the physical-layer
    reception probability of the corresponding leader link.
    """

    time: float
    density: dict[int, float] = field(default_factory=dict)
    xi: dict[int, float] = field(default_factory=dict)
    success: dict[int, bool] = field(default_factory=dict)
    p_single: dict[int, float] = field(default_factory=dict)
    clamps: dict[str, int] = field(default_factory=dict)

    def comm_ok(self, vehicle_id: int) -> bool:
        return self.success.get(vehicle_id, False)


def update_comm(positions, classes, ids, leader_ids, params: CommParams,
                coeffs: CommCoefficients, rng, time: float) -> CommSnapshot:
    """Recompute densities and per-leader-pair outcomes for one 2-Hz tick.

    ``leader_ids[i]`` is the id of vehicle i's same-lane leader (or -1).  Only
    CAV-behind-CAV links are drawn; the distance is front-bumper to
    front-bumper (antenna spacing).  With no CAVs the snapshot is empty and no
    randomness is consumed.
    """
    from .core import VehicleClass

    positions = np.asarray(positions, dtype=float)
    classes = np.asarray(classes)
    ids = np.asarray(ids)
    snap = CommSnapshot(time=time)
    cav = classes == VehicleClass.CAV
    if not np.any(cav):
        return snap
    delta = densities_for(positions[cav], params.phi)
    xi_raw = delta * params.phi * params.f
    xi = np.minimum(xi_raw, params.xi_max)
    snap.clamps["xi"] = int(np.sum(xi_raw > params.xi_max))
    snap.density = dict(zip(ids[cav].tolist(), delta.tolist()))
    snap.xi = dict(zip(ids[cav].tolist(), xi.tolist()))

    id_to_index = {int(v): k for k, v in enumerate(ids.tolist())}
    cav_ids = ids[cav]
    xi_of = dict(zip(cav_ids.tolist(), xi.tolist()))
    pair_follower, pair_dist, pair_xi = [], [], []
    for i in np.flatnonzero(cav):
        lid = int(leader_ids[i])
        if lid < 0:
            continue
        li = id_to_index.get(lid)
        if li is None or classes[li] != VehicleClass.CAV:
            continue
        pair_follower.append(int(ids[i]))
        pair_dist.append(abs(positions[li] - positions[i]))
        pair_xi.append(xi_of[int(ids[i])])
    if pair_follower:
        rows = coeffs.xi_poly(params.phi)
        p = reception_probability_fast(
            np.asarray(pair_dist) / params.phi, np.asarray(pair_xi), rows, snap.clamps
        )
        ok = transmission_success(p, params.attempts, rng)
        ok = np.atleast_1d(ok)
        for fid, psi, okv in zip(pair_follower, np.atleast_1d(p), ok):
            snap.p_single[fid] = float(psi)
            snap.success[fid] = bool(okv)
    return snap

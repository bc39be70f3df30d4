"""Localization and scaling diagnostics computed from lattice snapshots.

Coordinates: ``eps_t = (t+1)^(-1/(1-gamma))``, ``tau = log(t+1)``, and each
composition ``alpha`` maps to ``rho = |alpha| eps_t`` and the direction
``theta = alpha/|alpha|`` on the simplex.  Directions are compared with the
1-norm; the dispersion functional uses the Euclidean norm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.special import comb

from .errors import DomainError
from .lattice import mass_vector, moment

BINS_PER_DECADE = 64
DELTA_FLOOR = 1e-3
M_CAP = 1e3
WINDOW_MASS = 0.95


def default_resolution(d):
    return {1: 1, 2: 40, 3: 12}.get(d, 6)


def eulerian(n, m):
    """Number of permutations of ``n`` letters with ``m`` ascents."""
    return int(sum((-1) ** j * comb(n + 1, j, exact=True) * (m + 1 - j) ** n for j in range(m + 1)))


class SimplexBinning:
    """Barycentric-box partition of the simplex at resolution ``h``.

    Cell ``(k, s)`` collects directions with ``floor(h theta) = k``, where
    ``s = h - sum(k)`` is the number of fractional units left over.  Such a
    cell is a slice of a unit cube, so its Hausdorff measure is an Eulerian
    number times ``sqrt(d) / ((d-1)! h^(d-1))``.
    """

    def __init__(self, d, resolution=None):
        h = default_resolution(d) if resolution is None else int(resolution)
        if d < 1 or h < 1:
            raise DomainError("binning needs d >= 1 and resolution >= 1")
        self.d, self.h = d, h
        if d == 1:
            ks = np.zeros((1, 1), dtype=np.int64)
            ss = np.ones(1, dtype=np.int64)
        else:
            rows, slack = [], []
            for s in range(1, d):
                for k in _compositions(h - s, d):
                    rows.append(k)
                    slack.append(s)
            ks = np.asarray(rows, dtype=np.int64)
            ss = np.asarray(slack, dtype=np.int64)
        self.k, self.s = ks, ss
        if d == 1:
            self.centers = np.ones((1, 1))
            self.measures = np.ones(1)
        else:
            self.centers = (ks + ss[:, None] / d) / h
            unit = math.sqrt(d) / math.factorial(d - 1) / h ** (d - 1)
            self.measures = np.array([eulerian(d - 1, s - 1) for s in ss.tolist()], float) * unit
        self._radix = (h + 1) ** np.arange(d, dtype=np.int64)
        keys = ks @ self._radix
        self._order = np.argsort(keys)
        self._sorted = keys[self._order]

    def __len__(self):
        return len(self.k)

    @property
    def resolution(self):
        return self.h

    @property
    def total_measure(self):
        return math.sqrt(self.d) / math.factorial(self.d - 1)

    def _lookup(self, k):
        keys = k @ self._radix
        pos = np.searchsorted(self._sorted, keys)
        if np.any(pos >= len(self._sorted)) or np.any(self._sorted[np.minimum(pos, len(self) - 1)] != keys):
            raise DomainError("direction outside the simplex")
        return self._order[pos]

    def _fix_grid_vertices(self, k, frac_key):
        s = self.h - k.sum(axis=1)
        vert = s == 0
        if np.any(vert):
            # a grid vertex belongs to the cell in which its largest coordinate is at the upper edge
            rows = np.flatnonzero(vert)
            cols = np.argmax(np.where(k[rows] > 0, frac_key[rows], -np.inf), axis=1)
            k[rows, cols] -= 1
        return k

    def assign(self, alphas):
        """Cell index of each composition, using exact integer arithmetic."""
        alphas = np.asarray(alphas, dtype=np.int64)
        if self.d == 1:
            return np.zeros(len(alphas), dtype=np.int64)
        size = alphas.sum(axis=1)
        k = (self.h * alphas) // size[:, None]
        k = self._fix_grid_vertices(k, alphas.astype(float))
        return self._lookup(k)

    def assign_theta(self, theta):
        theta = np.atleast_2d(np.asarray(theta, float))
        if self.d == 1:
            return np.zeros(len(theta), dtype=np.int64)
        k = np.floor(self.h * theta + 1e-12).astype(np.int64)
        k = np.clip(k, 0, self.h)
        s = self.h - k.sum(axis=1)
        k = self._fix_grid_vertices(k, theta)
        over = s >= self.d
        if np.any(over):
            raise DomainError("direction is not on the simplex")
        return self._lookup(k)


def _compositions(total, parts):
    if parts == 1:
        yield (total,)
        return
    for first in range(total + 1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


@dataclass
class RescaledSnapshot:
    """Lattice snapshot in self-similar coordinates, binned in (rho, cell)."""

    time: float
    tau: float
    eps: float
    gamma: float
    radial_edges: np.ndarray
    cells: SimplexBinning
    mass: np.ndarray
    rho: np.ndarray
    cell: np.ndarray
    weight: np.ndarray
    theta: np.ndarray

    @property
    def total_mass(self):
        return float(np.sum(self.weight))


def self_similar_eps(t, gamma):
    return (t + 1.0) ** (-1.0 / (1.0 - gamma))


def log_edges(rho, per_decade=BINS_PER_DECADE):
    if rho.size == 0:
        return np.zeros(0)
    lo = math.floor(per_decade * math.log10(rho.min()))
    hi = math.ceil(per_decade * math.log10(rho.max()))
    if hi == lo:
        hi += 1
    edges = 10.0 ** (np.arange(lo, hi + 1) / per_decade)
    edges[0] = min(edges[0], rho.min())
    edges[-1] = max(edges[-1], rho.max())
    return edges


def rescale(state, gamma, binning=None, bins_per_decade=BINS_PER_DECADE):
    """Map a snapshot to ``(rho, theta)`` and bin its monomer mass ``|alpha| n_alpha``."""
    if state.time < 0:
        raise DomainError("rescale needs t >= 0")
    binning = SimplexBinning(state.d) if binning is None else binning
    eps = self_similar_eps(state.time, gamma)
    keep = state.values != 0
    alphas = state.alphas[keep]
    sizes = alphas.sum(axis=1)
    rho = sizes * eps
    weight = sizes * state.values[keep]
    theta = alphas / sizes[:, None] if len(sizes) else np.zeros((0, state.d))
    cell = binning.assign(alphas) if len(sizes) else np.zeros(0, dtype=np.int64)
    edges = log_edges(rho, bins_per_decade)
    if len(rho):
        rbin = np.clip(np.searchsorted(edges, rho, side="right") - 1, 0, len(edges) - 2)
        flat = rbin * len(binning) + cell
        mass = np.bincount(flat, weights=weight, minlength=(len(edges) - 1) * len(binning))
        mass = mass.reshape(len(edges) - 1, len(binning))
    else:
        mass = np.zeros((0, len(binning)))
    return RescaledSnapshot(state.time, math.log(state.time + 1.0), eps, gamma, edges, binning,
                            mass, rho, cell, weight, theta)


@dataclass
class AngularMeasure:
    """Window-restricted angular distribution of monomer mass.

    ``defined`` is False when the window ``[1/M, M]`` holds no mass; the
    weights are then ``None``.
    """

    binning: SimplexBinning
    weights: np.ndarray | None
    M: float
    tau: float
    centers: np.ndarray | None = None
    window_mass: float = 0.0
    window_fraction: float = 0.0

    @property
    def defined(self):
        return self.weights is not None


def adaptive_M(snapshot, fraction=WINDOW_MASS, cap=M_CAP):
    """Smallest ``M`` whose window ``[1/M, M]`` holds ``fraction`` of the mass (capped)."""
    if snapshot.rho.size == 0:
        return cap
    need = np.maximum(snapshot.rho, 1.0 / snapshot.rho)
    order = np.argsort(need, kind="stable")
    cum = np.cumsum(snapshot.weight[order])
    i = int(np.searchsorted(cum, fraction * cum[-1] * (1 - 1e-15)))
    i = min(i, len(order) - 1)
    return float(min(cap, max(need[order[i]], 1.0 + 1e-9)))


def angular_measure(snapshot, M=None):
    if M is None:
        M = adaptive_M(snapshot)
    if not M > 1:
        raise DomainError("window parameter M must exceed 1")
    inside = (snapshot.rho >= 1.0 / M) & (snapshot.rho <= M)
    binning = snapshot.cells
    w = np.bincount(snapshot.cell[inside], weights=snapshot.weight[inside], minlength=len(binning))
    total = float(w.sum())
    frac = total / snapshot.total_mass if snapshot.total_mass > 0 else 0.0
    if not total > 0:
        return AngularMeasure(binning, None, float(M), snapshot.tau)
    centers = binning.centers.copy()
    sums = np.zeros_like(centers)
    for j in range(binning.d):
        sums[:, j] = np.bincount(snapshot.cell[inside], weights=snapshot.weight[inside] * snapshot.theta[inside, j],
                                 minlength=len(binning))
    hit = w > 0
    centers[hit] = sums[hit] / w[hit, None]
    return AngularMeasure(binning, w / total, float(M), snapshot.tau, centers, total, frac)


def dispersion(lam):
    """``sum_ij w_i w_j |c_i - c_j|^2`` with Euclidean norm."""
    if not lam.defined:
        raise DomainError("dispersion of an undefined angular measure")
    w, c = lam.weights, lam.centers
    mean = w @ c
    return float(max(0.0, 2.0 * np.sum(w * np.sum((c - mean) ** 2, axis=1))))


def best_cap(lam, eps):
    """Heaviest set of cells within 1-norm distance ``eps/2`` of some cell center."""
    if not lam.defined:
        raise DomainError("best_cap of an undefined angular measure")
    if not eps > 0:
        raise DomainError("eps must be positive")
    w, c = lam.weights, lam.centers
    diam = 2.0 if lam.binning.d > 1 else 0.0
    if eps >= diam:
        return int(np.argmax(w)), 1.0
    dist = np.abs(c[:, None, :] - c[None, :, :]).sum(axis=2)
    captured = (dist <= eps / 2) @ w
    i = int(np.argmax(captured))
    return i, float(min(1.0, captured[i]))


def theta0(initial):
    m = mass_vector(initial) + initial.escaped_mass
    total = float(np.sum(m))
    if not total > 0:
        raise DomainError("theta0 needs positive initial mass")
    return m / total


def mean_direction(state):
    """Mass-weighted mean of ``alpha/|alpha|`` (equals normalized mass vector)."""
    if len(state) == 0:
        raise DomainError("empty state has no mean direction")
    sizes = state.sizes
    w = sizes * state.values
    return (w @ (state.alphas / sizes[:, None])) / w.sum()


def _direction_distance(state, theta0_):
    sizes = state.sizes
    return np.abs(state.alphas / sizes[:, None] - np.asarray(theta0_, float)).sum(axis=1), sizes


def _reference_mass(state):
    return float(np.sum(mass_vector(state) + state.escaped_mass))


def localized_mass_fraction(state, gamma, delta, theta0_, size_delta=None):
    """Fraction of ``m0`` in ``{sd T <= |a| <= T/sd} ∩ {|a/|a| - theta0| <= delta}``.

    ``T = t^(1/(1-gamma))`` and ``sd`` defaults to ``delta``.  Passing a fixed
    ``size_delta`` decouples the size window from the direction tolerance.
    """
    if not state.time > 0:
        raise DomainError("localized_mass_fraction needs t > 0")
    if not 0 < delta <= 1:
        raise DomainError("delta must lie in (0, 1]")
    sd = delta if size_delta is None else size_delta
    m0 = _reference_mass(state)
    if len(state) == 0 or m0 == 0:
        return 0.0
    T = state.time ** (1.0 / (1.0 - gamma))
    dist, sizes = _direction_distance(state, theta0_)
    inside = (sizes >= sd * T) & (sizes <= T / sd) & (dist <= delta)
    return float(np.sum(sizes[inside] * state.values[inside]) / m0)


def _smallest_delta(state, gamma, theta0_, target, floor=DELTA_FLOOR):
    """Exact smallest ``delta`` in ``[floor, 1]`` reaching ``target``, or ``None``.

    A composition counts for ``delta`` in ``[dist, min(|a|/T, T/|a|)]``, so the
    fraction is piecewise constant and can only rise at ``delta = dist``.
    """
    m0 = _reference_mass(state)
    if target <= 0:
        return floor
    if len(state) == 0 or m0 == 0:
        return None
    T = state.time ** (1.0 / (1.0 - gamma))
    dist, sizes = _direction_distance(state, theta0_)
    upper = np.minimum(sizes / T, T / sizes)
    w = sizes * state.values / m0
    ok = (dist <= upper) & (upper >= floor) & (dist <= 1.0)
    dist, upper, w = dist[ok], upper[ok], w[ok]
    cand = np.unique(np.concatenate([[floor], dist[dist >= floor]]))
    o1 = np.argsort(dist, kind="stable")
    o2 = np.argsort(upper, kind="stable")
    c1 = np.concatenate([[0.0], np.cumsum(w[o1])])
    c2 = np.concatenate([[0.0], np.cumsum(w[o2])])
    frac = c1[np.searchsorted(dist[o1], cand, side="right")] - c2[np.searchsorted(upper[o2], cand, side="left")]
    hit = np.flatnonzero(frac >= target)
    return float(cand[hit[0]]) if hit.size else None


@dataclass
class DeltaSchedule:
    times: list
    deltas: list
    reached: list
    target: float
    nonincreasing_last_half: bool

    def nonincreasing_between(self, t_lo, t_hi):
        seq = [d for t, d in zip(self.times, self.deltas) if t_lo <= t <= t_hi]
        return all(b <= a for a, b in zip(seq, seq[1:]))

    def to_dict(self):
        return {"times": self.times, "deltas": self.deltas, "reached": self.reached,
                "target": self.target, "nonincreasing_last_half": self.nonincreasing_last_half}


def delta_schedule(trajectory, gamma, theta0_, target, t_min=1.0):
    if not 0 <= target < 1:
        raise DomainError("target must lie in [0, 1)")
    snaps = [s for s in trajectory if s.time >= t_min]
    if len(snaps) < 3:
        raise DomainError("delta_schedule needs at least 3 snapshots at t >= 1")
    times, deltas, reached = [], [], []
    for s in snaps:
        dlt = _smallest_delta(s, gamma, theta0_, target)
        times.append(s.time)
        deltas.append(1.0 if dlt is None else dlt)
        reached.append(dlt is not None)
    half = deltas[len(deltas) // 2:]
    mono = all(b <= a for a, b in zip(half, half[1:]))
    return DeltaSchedule(times, deltas, reached, float(target), mono)


@dataclass
class MomentFit:
    k: float
    slope: float
    intercept: float
    max_ratio: float
    times: list = field(default_factory=list)
    values: list = field(default_factory=list)

    def to_dict(self):
        return {"k": self.k, "slope": self.slope, "intercept": self.intercept,
                "max_ratio": self.max_ratio, "times": self.times, "values": self.values}


def moment_scaling_fit(trajectory, k, gamma, window):
    """Least-squares slope of ``log M_k`` against ``log t`` inside ``window``."""
    t_lo, t_hi = window
    snaps = [s for s in trajectory if t_lo * (1 - 1e-12) <= s.time <= t_hi * (1 + 1e-12)]
    if len(snaps) < 5 or any(s.time < 1 for s in snaps):
        raise DomainError("moment fit needs at least 5 snapshots inside the window, all at t >= 1")
    t = np.array([s.time for s in snaps])
    m = np.array([moment(s, k).value for s in snaps])
    if np.any(m <= 0):
        raise DomainError("moment vanishes inside the window")
    slope, intercept = np.polyfit(np.log(t), np.log(m), 1)
    ratio = m * t ** (-(k - 1) / (1 - gamma))
    return MomentFit(float(k), float(slope), float(intercept), float(ratio.max()), t.tolist(), m.tolist())


@dataclass
class DispersionReport:
    times: list
    taus: list
    values: list
    cumulative: list
    M: list
    skipped: list
    plateau: bool

    def value_at(self, t, rtol=1e-9):
        for ti, v in zip(self.times, self.values):
            if abs(ti - t) <= rtol * max(1.0, t):
                return v
        raise KeyError(t)

    def to_dict(self):
        return {"times": self.times, "taus": self.taus, "values": self.values,
                "cumulative": self.cumulative, "M": self.M, "skipped": self.skipped,
                "plateau": self.plateau}


def plateau_flag(taus, cumulative, fraction=0.05):
    """True when the last quarter of the tau range adds less than ``fraction`` of the total."""
    if len(taus) < 2 or cumulative[-1] <= 0:
        return True
    t_q = taus[-1] - 0.25 * (taus[-1] - taus[0])
    at_q = float(np.interp(t_q, taus, cumulative))
    return (cumulative[-1] - at_q) < fraction * cumulative[-1]


def dispersion_decay_report(trajectory, gamma, M=None, binning=None, t_min=1.0):
    times, taus, vals, Ms, skipped = [], [], [], [], []
    for s in trajectory:
        if s.time < t_min:
            continue
        snap = rescale(s, gamma, binning)
        lam = angular_measure(snap, M)
        if not lam.defined:
            skipped.append(s.time)
            continue
        times.append(s.time)
        taus.append(snap.tau)
        vals.append(dispersion(lam))
        Ms.append(lam.M)
    if len(taus) >= 2:
        cum = [0.0] + cumulative_trapezoid(vals, taus).tolist()
    else:
        cum = [0.0] * len(taus)
    return DispersionReport(times, taus, vals, cum, Ms, skipped, plateau_flag(taus, cum))

"""Ray-supported self-similar profiles.

A profile concentrated on the ray through ``theta0`` is stored through its
radial factor ``g(rho)``: the number density per unit ``rho`` of rescaled
clusters, so that ``int rho g(rho) d rho`` is the monomer mass.  For kernels
constant on rays with value ``Q`` the attractor has

    g(rho) = 4 / (Q(theta0)^2 m0) * exp(-2 rho / (Q(theta0) m0)).

On the lattice a snapshot at time ``t`` corresponds to the rescaled number
measure ``sum_alpha n_alpha / eps_t`` placed at ``rho = |alpha| eps_t``.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from ._fs import atomic_write_text
from .diagnostics import SimplexBinning, self_similar_eps
from .errors import DomainError, InsufficientMass, SnapshotError
from .lattice import LatticeState, mass_vector

BATTERY_SIZE = 12
MIN_POINTS_PER_SUPPORT = 8
WINDOW_MASS_FLOOR = 0.5
FAMILY_BINS_PER_DECADE = 16


@dataclass
class RadialProfile:
    grid: np.ndarray
    values: np.ndarray
    theta0: np.ndarray
    m0: float
    d: int
    kernel_hash: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        self.theta0 = np.asarray(self.theta0, dtype=float)
        if self.grid.ndim != 1 or self.grid.shape != self.values.shape:
            raise DomainError("profile grid and values must be matching 1-d arrays")
        if np.any(np.diff(self.grid) <= 0):
            raise DomainError("profile grid must be strictly increasing")
        if np.any(self.values < 0) or not np.all(np.isfinite(self.values)):
            raise DomainError("profile values must be finite and nonnegative")

    def mass(self):
        """Trapezoidal ``int rho g(rho) d rho``."""
        return float(np.trapezoid(self.grid * self.values, self.grid))

    def to_csv_text(self):
        rows = ["rho,value"] + [f"{r!r},{v!r}" for r, v in zip(self.grid.tolist(), self.values.tolist())]
        return "\n".join(rows) + "\n"

    def sidecar(self):
        return {"theta0": self.theta0.tolist(), "m0": self.m0, "d": self.d,
                "kernel_hash": self.kernel_hash, "metadata": self.metadata}


def save_profile(profile, csv_path):
    csv_path = os.fspath(csv_path)
    atomic_write_text(csv_path, profile.to_csv_text())
    side = os.path.splitext(csv_path)[0] + ".json"
    atomic_write_text(side, json.dumps(profile.sidecar(), sort_keys=True, indent=1) + "\n")
    return csv_path, side


def load_profile(csv_path):
    csv_path = os.fspath(csv_path)
    side = os.path.splitext(csv_path)[0] + ".json"
    try:
        with open(side) as fh:
            meta = json.load(fh)
        data = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
        return RadialProfile(data[:, 0], data[:, 1], meta["theta0"], float(meta["m0"]), int(meta["d"]),
                             meta.get("kernel_hash", ""), meta.get("metadata", {}))
    except FileNotFoundError as exc:
        raise SnapshotError(f"missing profile file {exc.filename}") from exc
    except (ValueError, KeyError, IndexError, json.JSONDecodeError) as exc:
        raise SnapshotError(f"corrupt profile {csv_path}: {exc}") from exc


# ----------------------------------------------------------- explicit form


def _q_value(q, theta0):
    value = float(q(np.asarray(theta0, dtype=float))) if callable(q) else float(q)
    if not value > 0 or not math.isfinite(value):
        raise DomainError(f"Q(theta0) must be positive, got {value}")
    return value


def decay_rate(q_value, m0):
    return 2.0 / (q_value * m0)


def default_profile_grid(q_value, m0, points=20001, extent=40.0):
    """Uniform grid on ``[0, extent * Q m0 / 2]``."""
    return np.linspace(0.0, extent * q_value * m0 / 2.0, points)


def explicit_profile(theta0, q, m0, d, grid=None, kernel_hash=""):
    """Radial factor of the explicit attractor for a kernel equal to ``Q`` on rays."""
    if not m0 > 0:
        raise DomainError("m0 must be positive")
    qv = _q_value(q, theta0)
    grid = default_profile_grid(qv, m0) if grid is None else np.asarray(grid, dtype=float)
    values = 4.0 / (qv * qv * m0) * np.exp(-decay_rate(qv, m0) * grid)
    return RadialProfile(grid, values, np.asarray(theta0, dtype=float), float(m0), int(d), kernel_hash,
                         {"q_theta0": qv, "decay_rate": decay_rate(qv, m0)})


def explicit_bin_average(q_value, m0, lo, hi):
    """Mean of the explicit ``g`` over each interval ``[lo, hi]`` in closed form."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    k = decay_rate(q_value, m0)
    amp = 4.0 / (q_value * q_value * m0)
    return amp * (np.exp(-k * lo) - np.exp(-k * hi)) / (k * (hi - lo))


# ------------------------------------------------------------ weak residual


def bump(u):
    """C1 bump ``(1 - u^2)^2`` on ``[-1, 1]``."""
    u = np.asarray(u, dtype=float)
    return np.where(np.abs(u) < 1, (1 - u * u) ** 2, 0.0)


def bump_prime(u):
    u = np.asarray(u, dtype=float)
    return np.where(np.abs(u) < 1, -4 * u * (1 - u * u), 0.0)


@dataclass(frozen=True)
class TestFunction:
    """``psi(rho) = rho * bump((rho - a) / w)``, supported on ``[a - w, a + w]``."""

    a: float
    w: float

    def __call__(self, rho):
        return rho * bump((rho - self.a) / self.w)

    def derivative(self, rho):
        u = (rho - self.a) / self.w
        return bump(u) + rho * bump_prime(u) / self.w

    @property
    def support(self):
        return self.a - self.w, self.a + self.w


def make_battery(rho_lo, rho_hi, count=BATTERY_SIZE):
    """Log-spaced centers in ``[rho_lo, rho_hi]`` with half-width ``a/2``."""
    if not 0 < rho_lo < rho_hi:
        raise DomainError("battery range must satisfy 0 < rho_lo < rho_hi")
    return [TestFunction(float(a), float(a) / 2.0) for a in np.geomspace(rho_lo, rho_hi, count)]


def default_battery(profile, count=BATTERY_SIZE, lower=0.05, upper=0.95):
    """Battery spanning the mass quantiles ``lower`` to ``upper`` of the profile."""
    dens = profile.grid * profile.values
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(profile.grid))])
    if not cum[-1] > 0:
        raise DomainError("profile carries no mass")
    cum /= cum[-1]
    lo, hi = np.interp([lower, upper], cum, profile.grid)
    return make_battery(lo, hi, count)


def _trapezoid_weights(grid):
    h = np.diff(grid)
    w = np.zeros_like(grid)
    w[1:] += h / 2
    w[:-1] += h / 2
    return w


def check_bandwidth(grid, battery, min_points=MIN_POINTS_PER_SUPPORT):
    """Raise when some test function's support spans fewer than ``min_points`` grid cells."""
    for psi in battery:
        lo, hi = psi.support
        inside = np.count_nonzero((grid > lo) & (grid < hi))
        if inside < min_points:
            raise DomainError(f"grid too coarse for test function centred at {psi.a:.6g}: "
                              f"{inside} points inside its support, need {min_points}")
        if hi > grid[-1]:
            raise DomainError(f"test function centred at {psi.a:.6g} extends past the profile grid")


def ray_kernel_matrix(kernel, theta0, grid):
    """``K(rho theta0, r theta0)`` on the grid, zero where either argument is 0."""
    theta0 = np.asarray(theta0, dtype=float)
    pos = grid > 0
    out = np.zeros((grid.size, grid.size))
    pts = grid[pos, None] * theta0[None, :]
    out[np.ix_(pos, pos)] = kernel.evaluate(pts[:, None, :], pts[None, :, :])
    return out


def weak_residuals(profile, kernel, gamma, battery=None, drift_factor=1.0):
    """Ray reduction of the weak self-similar identity for each test function.

    Each entry is ``1/2 iint g g K [psi(rho+r) - psi(rho) - psi(r)]
    + c/(1-gamma) int g [psi - rho psi']`` with ``c = drift_factor``.
    """
    if gamma >= 1:
        raise DomainError("gamma must be < 1")
    grid = profile.grid
    battery = default_battery(profile) if battery is None else battery
    check_bandwidth(grid, battery)
    w = _trapezoid_weights(grid)
    gw = profile.values * w
    pair = 0.5 * ray_kernel_matrix(kernel, profile.theta0, grid) * np.outer(gw, gw)
    row = pair.sum(axis=1)
    total = grid[:, None] + grid[None, :]
    out = np.empty(len(battery))
    for i, psi in enumerate(battery):
        lo, hi = psi.support
        vals = psi(grid)
        coag = -2.0 * float(row @ vals)
        # psi(rho + r) only matters where rho + r falls inside the support
        sel = (grid < hi)
        sub = total[np.ix_(sel, sel)]
        coag += float(np.sum(pair[np.ix_(sel, sel)] * psi(sub)))
        drift = drift_factor / (1.0 - gamma) * float(gw @ (vals - grid * psi.derivative(grid)))
        out[i] = coag + drift
    return out


def residual_weak_selfsimilar(profile, kernel, gamma, test_battery=None, drift_factor=1.0):
    """Maximum absolute weak residual over the battery."""
    if not np.any(profile.values > 0):
        return 0.0
    return float(np.max(np.abs(weak_residuals(profile, kernel, gamma, test_battery, drift_factor))))


# ------------------------------------------------------ lattice round trip


def ray_vector(theta0, max_den=1000):
    """Smallest integer vector on the ray through ``theta0``."""
    from fractions import Fraction

    theta0 = np.asarray(theta0, dtype=float)
    fr = [Fraction(float(x)).limit_denominator(max_den) for x in theta0]
    den = math.lcm(*[f.denominator for f in fr])
    v = np.array([int(f * den) for f in fr], dtype=np.int64)
    g = math.gcd(*v.tolist())
    if g == 0:
        raise DomainError("theta0 must be nonzero")
    return v // g


def state_from_profile(profile, t, gamma, n_max, ray=None, normalize=True):
    """Lattice state on the ray whose rescaled number density follows ``profile``.

    ``n_{m v} = eps * g(|m v| eps) * |v| eps``.  With ``normalize`` the
    concentrations are scaled so the lattice mass equals ``profile.m0``.
    """
    v = ray_vector(profile.theta0) if ray is None else np.asarray(ray, dtype=np.int64)
    size = int(v.sum())
    eps = self_similar_eps(t, gamma)
    m = np.arange(1, n_max // size + 1)
    rho = m * size * eps
    g = np.interp(rho, profile.grid, profile.values, right=0.0)
    values = eps * g * size * eps
    keep = values > 0
    m, values = m[keep], values[keep]
    if normalize and values.size:
        values = values * profile.m0 / float(np.sum(m * size * values))
    return LatticeState(profile.d, n_max, m[:, None] * v[None, :], values, time=t)


# --------------------------------------------------------------- extraction


def _direction_distance(alphas, theta0):
    sizes = alphas.sum(axis=1)
    return np.abs(alphas / sizes[:, None] - theta0[None, :]).sum(axis=1), sizes


def extract_profile(state, gamma, delta, theta0, m0=None, sizes_per_bin=None, bins=64, kernel_hash=""):
    """Empirical radial factor of one snapshot.

    Rescaled number mass with direction within ``delta`` of ``theta0`` (1-norm)
    is binned on bins aligned with the size lattice (edges half a size
    stride off the occupied sizes, times ``eps``) and divided by ``eps``
    times the bin width.  The grid holds bin centres.  ``metadata['window_fraction']`` is the captured
    fraction of ``m0``; ``metadata['insufficient']`` flags fractions below 1/2.
    """
    theta0 = np.asarray(theta0, dtype=float)
    if m0 is None:
        m0 = float(np.sum(mass_vector(state) + state.escaped_mass))
    eps = self_similar_eps(state.time, gamma)
    keep = state.values > 0
    alphas, values = state.alphas[keep], state.values[keep]
    dist, sizes = _direction_distance(alphas, theta0) if len(values) else (np.zeros(0), np.zeros(0, int))
    inside = dist <= delta
    sizes, values = sizes[inside], values[inside]
    top = int(state.n_max if state.n_max is not None else (sizes.max() if sizes.size else 1))
    # occupied sizes are multiples of the stride; bins of a multiple of the
    # stride starting at stride/2 hold equally many sizes, centred in the bin
    stride = max(1, int(np.gcd.reduce(sizes))) if sizes.size else 1
    width = sizes_per_bin or stride * max(1, int(math.ceil(top / bins / stride)))
    offset = stride / 2.0 if width % stride == 0 else 0.5
    nb = int(math.ceil(top / width))
    edges_size = offset + width * np.arange(nb + 1)
    idx = (sizes - 1) // width
    number = np.bincount(idx, weights=values, minlength=nb)[:nb] if sizes.size else np.zeros(nb)
    drho = width * eps
    g = number / (eps * drho)
    centres = 0.5 * (edges_size[1:] + edges_size[:-1]) * eps
    captured = float(np.sum(sizes * values)) / m0 if m0 > 0 else 0.0
    meta = {"time": state.time, "eps": eps, "delta": float(delta), "sizes_per_bin": width,
            "edges": (edges_size * eps).tolist(), "window_fraction": captured,
            "insufficient": captured < WINDOW_MASS_FLOOR}
    return RadialProfile(centres, g, theta0, float(m0), state.d, kernel_hash, meta)


def extract_profiles(trajectory, gamma, delta, theta0, t_min=100.0, **kwargs):
    """``extract_profile`` at every snapshot with ``t >= t_min``."""
    return [extract_profile(s, gamma, delta, theta0, **kwargs) for s in trajectory if s.time >= t_min]


@dataclass
class ProfileComparison:
    time: float
    l1_error: float
    linf_error: float
    fitted_decay_rate: float
    expected_decay_rate: float
    window_fraction: float
    insufficient: bool

    @property
    def decay_rate_error(self):
        return abs(self.fitted_decay_rate - self.expected_decay_rate) / self.expected_decay_rate

    def to_dict(self):
        return {"time": self.time, "l1_error": self.l1_error, "linf_error": self.linf_error,
                "fitted_decay_rate": self.fitted_decay_rate,
                "expected_decay_rate": self.expected_decay_rate,
                "decay_rate_error": self.decay_rate_error,
                "window_fraction": self.window_fraction, "insufficient": self.insufficient}


def compare_profile(extracted, q_value, m0=None, fit_lo=0.05, fit_hi=0.8):
    """Compare an extracted profile with the explicit attractor on its bins.

    L1 and L-infinity errors are relative to the explicit bin averages over the
    bins of ``extracted``.  The decay rate comes from a least-squares line
    through ``log g`` on bins with ``fit_lo * Q m0 / 2 <= rho <= fit_hi * rho_max``.
    """
    m0 = extracted.m0 if m0 is None else m0
    edges = np.asarray(extracted.metadata["edges"])
    lo, hi = edges[:-1], edges[1:]
    ref = explicit_bin_average(q_value, m0, lo, hi)
    width = hi - lo
    diff = np.abs(extracted.values - ref)
    l1 = float(np.sum(diff * width) / np.sum(ref * width))
    linf = float(diff.max() / ref.max())
    rho = extracted.grid
    sel = (rho >= fit_lo * q_value * m0 / 2.0) & (rho <= fit_hi * edges[-1]) & (extracted.values > 0)
    if np.count_nonzero(sel) >= 2:
        slope = np.polyfit(rho[sel], np.log(extracted.values[sel]), 1)[0]
        fitted = float(-slope)
    else:
        fitted = float("nan")
    meta = extracted.metadata
    return ProfileComparison(float(meta.get("time", float("nan"))), l1, linf, fitted,
                             decay_rate(q_value, m0), float(meta.get("window_fraction", 1.0)),
                             bool(meta.get("insufficient", False)))


def require_window_mass(extracted):
    if extracted.metadata.get("insufficient"):
        raise InsufficientMass(f"only {extracted.metadata['window_fraction']:.3g} of m0 lies in the "
                               f"direction window at t={extracted.metadata.get('time')}")


# ----------------------------------------------------------- scaling family


def _cic_histogram(state, gamma, binning, lo_exp, n_bins, per_decade):
    eps = self_similar_eps(state.time, gamma)
    keep = state.values > 0
    alphas = state.alphas[keep]
    sizes = alphas.sum(axis=1)
    weight = sizes * state.values[keep]
    x = np.log10(sizes * eps) * per_decade - lo_exp
    left = np.floor(x).astype(np.int64)
    frac = x - left
    cell = binning.assign(alphas)
    hist = np.zeros((n_bins, len(binning)))
    np.add.at(hist, (np.clip(left, 0, n_bins - 1), cell), weight * (1 - frac))
    np.add.at(hist, (np.clip(left + 1, 0, n_bins - 1), cell), weight * frac)
    return hist


@dataclass
class FamilyCheck:
    t: float
    t_scaled: float
    lam: float
    discrepancy: float
    bins_compared: int

    def to_dict(self):
        return {"t": self.t, "t_scaled": self.t_scaled, "lambda": self.lam,
                "discrepancy": self.discrepancy, "bins_compared": self.bins_compared}


def scaling_family_check(trajectory, gamma, lam, t, mass_floor=0.01, per_decade=FAMILY_BINS_PER_DECADE,
                         binning=None):
    """Compare rescaled snapshots at ``t`` and ``lam^(1-gamma) (t+1) - 1``.

    For a self-similar solution both map to the same profile.  Monomer mass is
    deposited on a log-``rho`` grid by linear (cloud-in-cell) weights to avoid
    lattice aliasing.  The discrepancy is the maximal relative difference over
    bins holding at least ``mass_floor`` of the mass at ``t``.
    """
    if not lam > 0:
        raise DomainError("lambda must be positive")
    t2 = lam ** (1.0 - gamma) * (t + 1.0) - 1.0
    try:
        a = trajectory.at(t)
        b = trajectory.at(t2)
    except KeyError as exc:
        raise DomainError(f"time arguments t={t}, t'={t2} are not both snapshot times") from exc
    if a is b:
        return FamilyCheck(float(t), float(t2), float(lam), 0.0, 0)
    binning = SimplexBinning(a.d) if binning is None else binning
    rhos = []
    for s in (a, b):
        keep = s.values > 0
        rhos.append(s.alphas[keep].sum(axis=1) * self_similar_eps(s.time, gamma))
    rho = np.concatenate(rhos)
    lo_exp = math.floor(per_decade * math.log10(rho.min())) - 1
    n_bins = math.ceil(per_decade * math.log10(rho.max())) - lo_exp + 2
    ha = _cic_histogram(a, gamma, binning, lo_exp, n_bins, per_decade)
    hb = _cic_histogram(b, gamma, binning, lo_exp, n_bins, per_decade)
    sel = ha >= mass_floor * ha.sum()
    disc = float(np.max(np.abs(hb[sel] - ha[sel]) / ha[sel])) if sel.any() else 0.0
    return FamilyCheck(float(t), float(t2), float(lam), disc, int(np.count_nonzero(sel)))

"""Coagulation kernels: families, evaluation and bound checks.

A kernel is a symmetric nonnegative rate ``K(x, y)`` on pairs of nonzero
composition vectors.  All families here satisfy two-sided bounds of the form

    c1 (|x|+|y|)^gamma Phi_p(s) <= K(x, y) <= c2 (|x|+|y|)^gamma Phi_p(s),

with ``s = |x| / (|x|+|y|)`` and ``|.|`` the 1-norm.  Evaluation is vectorised
over leading axes: ``x`` and ``y`` are arrays of shape ``(..., d)``.

Families with a finite symmetrised separable expansion

    K(x, y) = sum_r c_r * (f_r(x) g_r(y) + g_r(x) f_r(y)) / 2

expose it through :meth:`KernelSpec.separable_terms`; the solver uses it to
evaluate the gain term as a convolution.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import ConfigError, DomainError

REL_TOL_CHECK = 1e-12


@dataclass(frozen=True)
class KernelParams:
    """Homogeneity degree, singularity exponent and bound constants."""

    gamma: float
    p: float
    c1: float
    c2: float

    def __post_init__(self):
        for name in ("gamma", "p", "c1", "c2"):
            if not np.isfinite(getattr(self, name)):
                raise ConfigError(f"kernel parameter {name} must be finite")
        if not 0 < self.c1 <= self.c2:
            raise ConfigError(f"kernel bounds need 0 < c1 <= c2, got c1={self.c1}, c2={self.c2}")
        if self.gamma + 2 * self.p < 0:
            raise ConfigError(f"kernel needs gamma + 2p >= 0, got gamma={self.gamma}, p={self.p}")

    @property
    def no_gelation(self) -> bool:
        return self.gamma < 1 and self.gamma + self.p < 1

    def require_no_gelation(self):
        """Raise unless the parameters lie in the non-gelling regime."""
        if not self.no_gelation:
            raise ConfigError(
                "no-gelation constraint violated: need gamma < 1 and gamma + p < 1, "
                f"got gamma={self.gamma}, p={self.p} (gamma + p = {self.gamma + self.p})"
            )


@dataclass(frozen=True)
class QForm:
    """Quadratic polynomial ``Q(theta) = q0 + qlin.theta + theta.qquad.theta`` on the simplex."""

    q0: float
    qlin: tuple
    qquad: tuple

    def __post_init__(self):
        lin = np.asarray(self.qlin, dtype=float)
        quad = np.asarray(self.qquad, dtype=float)
        d = lin.shape[0] if lin.ndim == 1 else -1
        if lin.ndim != 1 or quad.shape != (d, d):
            raise ConfigError("QForm needs qlin of length d and qquad of shape (d, d)")
        if not np.array_equal(quad, quad.T):
            raise ConfigError("QForm qquad must be symmetric")
        object.__setattr__(self, "qlin", tuple(float(v) for v in lin))
        object.__setattr__(self, "qquad", tuple(tuple(float(v) for v in row) for row in quad))

    @property
    def d(self) -> int:
        return len(self.qlin)

    @classmethod
    def from_dict(cls, data, d=None):
        lin = data.get("qlin")
        quad = data.get("qquad")
        if d is None:
            d = len(lin) if lin is not None else len(quad)
        if lin is None:
            lin = [0.0] * d
        if quad is None:
            quad = [[0.0] * d for _ in range(d)]
        return cls(float(data.get("q0", 0.0)), tuple(lin), tuple(map(tuple, quad)))

    def to_dict(self):
        return {"q0": self.q0, "qlin": list(self.qlin), "qquad": [list(r) for r in self.qquad]}

    def __call__(self, theta):
        theta = np.asarray(theta, dtype=float)
        lin = np.asarray(self.qlin)
        quad = np.asarray(self.qquad)
        out = self.q0 + theta @ lin
        if np.any(quad):
            out = out + np.einsum("...i,ij,...j->...", theta, quad, theta)
        return out

    def extremes(self):
        """Minimum and maximum of Q over a fine barycentric grid."""
        grid = simplex_grid(self.d, 360 if self.d <= 3 else 36)
        vals = self(grid)
        return float(vals.min()), float(vals.max())


def simplex_grid(d, denom):
    """All points of the simplex with coordinates in ``{0, 1/denom, ..., 1}``."""
    if d == 1:
        return np.ones((1, 1))
    pts = []

    def rec(prefix, remaining, slots):
        if slots == 1:
            pts.append(prefix + [remaining])
            return
        for k in range(remaining + 1):
            rec(prefix + [k], remaining - k, slots - 1)

    rec([], denom, d)
    return np.asarray(pts, dtype=float) / denom


def phi_p(p, s):
    """Size-ratio factor ``s^-p (1-s)^-p`` on the open unit interval."""
    s_arr = np.asarray(s, dtype=float)
    if np.any(~((s_arr > 0) & (s_arr < 1))):
        raise DomainError("phi_p requires 0 < s < 1")
    out = (s_arr * (1.0 - s_arr)) ** (-p)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------- families


def _sizes(x):
    return np.sum(x, axis=-1)


@dataclass(frozen=True)
class Constant:
    value: float = 1.0
    name = "constant"
    degree = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.value) and self.value > 0):
            raise ConfigError("constant kernel value must be positive")

    def evaluate(self, x, y):
        shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(y)[:-1])
        return np.full(shape, float(self.value))

    def separable_terms(self, d):
        return [(float(self.value), _ones, _ones)]

    def extra(self):
        return {"value": self.value}


@dataclass(frozen=True)
class Additive:
    name = "additive"
    degree = 1.0

    def evaluate(self, x, y):
        return _sizes(x) + _sizes(y)

    def separable_terms(self, d):
        return [(2.0, _size, _ones)]

    def extra(self):
        return {}


@dataclass(frozen=True)
class Product:
    name = "product"
    degree = 2.0

    def evaluate(self, x, y):
        return _sizes(x) * _sizes(y)

    def separable_terms(self, d):
        return [(1.0, _size, _size)]

    def extra(self):
        return {}


@dataclass(frozen=True)
class PowerLawPair:
    """``scale * (|x|^(gamma+lam) |y|^-lam + |y|^(gamma+lam) |x|^-lam)``."""

    lam: float
    scale: float
    gamma: float
    name = "power_law_pair"

    def __post_init__(self):
        if not self.scale > 0:
            raise ConfigError("power_law_pair scale must be positive")

    @property
    def degree(self):
        return self.gamma

    def evaluate(self, x, y):
        sx, sy = _sizes(x), _sizes(y)
        a = self.gamma + self.lam
        return self.scale * (sx**a * sy ** (-self.lam) + sy**a * sx ** (-self.lam))

    def separable_terms(self, d):
        a, lam = self.gamma + self.lam, self.lam
        return [(2.0 * self.scale, _power(a), _power(-lam))]

    def extra(self):
        return {"lambda": self.lam, "scale": self.scale}

    def natural_p(self):
        return max(self.lam, -self.gamma - self.lam)

    def bound_constants(self, p=None):
        """Sharp ``c1, c2`` for the bound class with exponent ``p``."""
        p = self.natural_p() if p is None else p
        a = self.gamma + self.lam + p
        b = p - self.lam
        if a < 0 or b < 0:
            raise ConfigError("power_law_pair exponent p too small for the bound class")

        def ratio(s):
            return self.scale * (s**a * (1 - s) ** b + (1 - s) ** a * s**b)

        s = np.linspace(0.0, 0.5, 20001)[1:]
        vals = ratio(s)
        lim0 = self.scale * ((1.0 if a == 0 else 0.0) + (1.0 if b == 0 else 0.0))
        lo = min(vals.min(), lim0)
        hi = max(vals.max(), lim0)
        for sign in (1.0, -1.0):
            res = minimize_scalar(lambda u: sign * ratio(u), bounds=(1e-12, 0.5), method="bounded",
                                  options={"xatol": 1e-14})
            v = float(ratio(res.x))
            lo, hi = min(lo, v), max(hi, v)
        if lo <= 0:
            raise ConfigError("power_law_pair has no positive lower bound for this p")
        return lo * (1 - 1e-9), hi * (1 + 1e-9)


@dataclass(frozen=True)
class RayConstant:
    """Degree-0 kernel equal to ``Q(theta)`` on each ray.

    Off the diagonal ray the kernel is ``(Q(theta_x) + Q(theta_y)) / 2``.
    """

    q: QForm
    name = "ray_constant"
    degree = 0.0

    def evaluate(self, x, y):
        qx = self.q(np.asarray(x, float) / _sizes(x)[..., None])
        qy = self.q(np.asarray(y, float) / _sizes(y)[..., None])
        return 0.5 * (qx + qy)

    def separable_terms(self, d):
        q = self.q

        def qtheta(alpha, size):
            out = np.zeros(size.shape)
            nz = size > 0
            out[nz] = q(alpha[nz] / size[nz][:, None])
            return out

        return [(1.0, qtheta, _ones)]

    def extra(self):
        return {"q": self.q.to_dict()}


@dataclass(frozen=True)
class HomogeneousTable:
    """``(|x|+|y|)^gamma T(s)`` with ``T`` tabulated and linearly interpolated.

    The table is read at ``min(s, 1-s)``, which makes evaluation exactly
    symmetric; values outside the tabulated range are held constant.
    """

    s: tuple
    t: tuple
    gamma: float
    name = "homogeneous_table"

    def __post_init__(self):
        s = np.asarray(self.s, float)
        t = np.asarray(self.t, float)
        if s.ndim != 1 or s.shape != t.shape or s.size < 2:
            raise ConfigError("homogeneous_table needs at least two (s, T) pairs")
        if np.any((s <= 0) | (s >= 1)) or np.any(np.diff(s) <= 0):
            raise ConfigError("homogeneous_table s values must be strictly increasing in (0, 1)")
        if np.any(~np.isfinite(t)) or np.any(t <= 0):
            raise ConfigError("homogeneous_table T values must be positive")
        mirrored = np.interp(1 - s, s, t)
        if np.any(np.abs(mirrored - t) > 1e-9 * t):
            raise ConfigError("homogeneous_table T must be symmetric under s -> 1 - s")
        object.__setattr__(self, "s", tuple(float(v) for v in s))
        object.__setattr__(self, "t", tuple(float(v) for v in t))

    @property
    def degree(self):
        return self.gamma

    def evaluate(self, x, y):
        sx, sy = _sizes(x), _sizes(y)
        total = sx + sy
        u = np.minimum(sx, sy) / total
        return total**self.gamma * np.interp(u, self.s, self.t)

    def separable_terms(self, d):
        return None

    def extra(self):
        return {"table": [[a, b] for a, b in zip(self.s, self.t)]}


def _ones(alpha, size):
    return (size > 0).astype(float)


def _size(alpha, size):
    return size.astype(float)


def _power(e):
    def f(alpha, size):
        out = np.zeros(size.shape)
        nz = size > 0
        out[nz] = size[nz].astype(float) ** e
        return out

    return f


FAMILIES = ("constant", "additive", "product", "power_law_pair", "ray_constant", "homogeneous_table")


@dataclass(frozen=True)
class KernelSpec:
    params: KernelParams
    family: object
    d: int | None = field(default=None)

    # construction helpers -------------------------------------------------
    @classmethod
    def constant(cls, value=1.0):
        return cls(KernelParams(0.0, 0.0, value, value), Constant(value))

    @classmethod
    def additive(cls):
        return cls(KernelParams(1.0, 0.0, 1.0, 1.0), Additive())

    @classmethod
    def product(cls):
        return cls(KernelParams(2.0, -1.0, 1.0, 1.0), Product())

    @classmethod
    def power_law_pair(cls, gamma, lam, scale=1.0):
        fam = PowerLawPair(lam, scale, gamma)
        p = fam.natural_p()
        c1, c2 = fam.bound_constants(p)
        return cls(KernelParams(gamma, p, c1, c2), fam)

    @classmethod
    def ray_constant(cls, q):
        lo, hi = q.extremes()
        if lo <= 0:
            raise ConfigError("ray_constant Q must be positive on the simplex")
        return cls(KernelParams(0.0, 0.0, lo, hi), RayConstant(q), q.d)

    @classmethod
    def homogeneous_table(cls, s, t, gamma, p, c1, c2):
        return cls(KernelParams(gamma, p, c1, c2), HomogeneousTable(tuple(s), tuple(t), gamma))

    # evaluation -----------------------------------------------------------
    @property
    def gamma(self):
        return self.params.gamma

    def evaluate(self, x, y):
        """Vectorised evaluation without origin checks."""
        return self.family.evaluate(np.asarray(x, float), np.asarray(y, float))

    def separable_terms(self, d):
        return self.family.separable_terms(d)

    def validate(self, d=None):
        """Structural invariants needed before a run (raises ConfigError)."""
        d = self.d if d is None else d
        fam = self.family
        if isinstance(fam, RayConstant):
            if d is not None and fam.q.d != d:
                raise ConfigError(f"ray_constant Q has dimension {fam.q.d}, run has d={d}")
            lo, hi = fam.q.extremes()
            if lo < self.params.c1 * (1 - 1e-12) or hi > self.params.c2 * (1 + 1e-12):
                raise ConfigError(
                    f"ray_constant Q ranges over [{lo}, {hi}] on the simplex, outside [c1, c2]"
                )
        return self

    # serialisation --------------------------------------------------------
    def to_dict(self):
        out = {"family": self.family.name, "gamma": self.params.gamma, "p": self.params.p,
               "c1": self.params.c1, "c2": self.params.c2}
        out.update(self.family.extra())
        return out

    @classmethod
    def from_dict(cls, data, d=None):
        data = dict(data)
        family = data.pop("family", None)
        if family not in FAMILIES:
            raise ConfigError(f"unknown kernel family {family!r}; expected one of {FAMILIES}")
        defaults = {
            "constant": (0.0, 0.0),
            "additive": (1.0, 0.0),
            "product": (2.0, -1.0),
            "ray_constant": (0.0, 0.0),
        }
        g0, p0 = defaults.get(family, (None, None))
        gamma = data.pop("gamma", g0)
        p = data.pop("p", p0)
        c1 = data.pop("c1", None)
        c2 = data.pop("c2", None)
        if gamma is None:
            raise ConfigError(f"kernel family {family} needs gamma")
        if family == "constant":
            fam = Constant(float(data.pop("value", 1.0)))
            c1 = fam.value if c1 is None else c1
            c2 = fam.value if c2 is None else c2
        elif family in ("additive", "product"):
            fam = Additive() if family == "additive" else Product()
            c1 = 1.0 if c1 is None else c1
            c2 = 1.0 if c2 is None else c2
        elif family == "power_law_pair":
            if "lambda" not in data:
                raise ConfigError("power_law_pair needs lambda")
            fam = PowerLawPair(float(data.pop("lambda")), float(data.pop("scale", 1.0)), float(gamma))
            if p is None:
                p = fam.natural_p()
            if c1 is None or c2 is None:
                lo, hi = fam.bound_constants(p)
                c1 = lo if c1 is None else c1
                c2 = hi if c2 is None else c2
        elif family == "ray_constant":
            if "q" not in data:
                raise ConfigError("ray_constant needs q")
            fam = RayConstant(QForm.from_dict(data.pop("q"), d))
            if c1 is None or c2 is None:
                lo, hi = fam.q.extremes()
                c1 = lo if c1 is None else c1
                c2 = hi if c2 is None else c2
        else:
            table = data.pop("table", None)
            if not table:
                raise ConfigError("homogeneous_table needs a table of (s, T) pairs")
            arr = np.asarray(table, dtype=float)
            if arr.ndim != 2 or arr.shape[1] != 2:
                raise ConfigError("homogeneous_table table must be a list of (s, T) pairs")
            fam = HomogeneousTable(tuple(arr[:, 0]), tuple(arr[:, 1]), float(gamma))
        if data:
            raise ConfigError(f"unknown kernel fields for {family}: {sorted(data)}")
        if p is None or c1 is None or c2 is None:
            raise ConfigError(f"kernel family {family} needs p, c1 and c2")
        return cls(KernelParams(float(gamma), float(p), float(c1), float(c2)), fam, d)

    def content_hash(self):
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


def eval_kernel(spec, x, y):
    """Kernel value at one pair of nonzero points."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    if x.ndim != 1 or x.shape != y.shape:
        raise DomainError("eval_kernel takes two points of equal dimension")
    if np.any(x < 0) or np.any(y < 0):
        raise DomainError("kernel arguments must lie in the closed positive orthant")
    if not x.any() or not y.any():
        raise DomainError("kernel is undefined at the origin")
    return float(spec.evaluate(x, y))


# ------------------------------------------------------------------- checks


@dataclass
class CheckReport:
    name: str
    passed: bool
    worst_ratio_low: float = float("nan")
    worst_ratio_high: float = float("nan")
    max_rel_error: float = 0.0
    failing_sample: tuple | None = None

    def to_dict(self):
        out = {"name": self.name, "pass": bool(self.passed),
               "worst_ratio_low": float(self.worst_ratio_low),
               "worst_ratio_high": float(self.worst_ratio_high),
               "max_rel_error": float(self.max_rel_error)}
        if self.failing_sample is not None:
            out["failing_sample"] = [list(map(float, v)) for v in self.failing_sample]
        return out


def default_samples(d, sizes=None, denom=9):
    """Cross product of log-spaced sizes and a barycentric direction grid.

    Returns arrays ``(X, Y)`` holding every ordered pair of sample points.
    """
    if sizes is None:
        sizes = 2.0 ** np.arange(17)
    thetas = simplex_grid(d, denom)
    pts = (np.asarray(sizes, float)[:, None, None] * thetas[None, :, :]).reshape(-1, d)
    i, j = np.meshgrid(np.arange(len(pts)), np.arange(len(pts)), indexing="ij")
    return pts[i.ravel()], pts[j.ravel()]


def _as_samples(samples):
    x, y = (np.asarray(a, float) for a in samples)
    if x.ndim == 1:
        x, y = x[None, :], y[None, :]
    if x.shape != y.shape or x.shape[0] == 0:
        raise DomainError("samples must be a non-empty pair of (n, d) arrays")
    if np.any(_sizes(x) <= 0) or np.any(_sizes(y) <= 0):
        raise DomainError("kernel is undefined at the origin")
    return x, y


def _sample_at(x, y, i):
    return (tuple(x[i]), tuple(y[i]))


def check_bounds(spec, samples):
    """Two-sided bound ``c1 B <= K <= c2 B`` with ``B = (|x|+|y|)^gamma Phi_p(s)``."""
    x, y = _as_samples(samples)
    k = spec.evaluate(x, y)
    sx, sy = _sizes(x), _sizes(y)
    total = sx + sy
    par = spec.params
    bound = total**par.gamma * (sx * sy / total**2) ** (-par.p)
    low = k / (par.c1 * bound)
    high = k / (par.c2 * bound)
    ok = np.isfinite(k) & (k >= 0) & (low >= 1 - REL_TOL_CHECK) & (high <= 1 + REL_TOL_CHECK)
    bad = None if ok.all() else _sample_at(x, y, int(np.argmin(ok)))
    return CheckReport("bounds", bool(ok.all()), float(low.min()), float(high.max()), failing_sample=bad)


def check_homogeneity(spec, samples, scales=(1e-3, 1.0, 1e3), rel_tol=REL_TOL_CHECK):
    """``K(rx, ry) = r^gamma K(x, y)`` for every sample and scale."""
    x, y = _as_samples(samples)
    k = spec.evaluate(x, y)
    worst = 0.0
    bad = None
    for r in scales:
        if not r > 0:
            raise DomainError("homogeneity scales must be positive")
        want = r**spec.params.gamma * k
        got = spec.evaluate(r * x, r * y)
        err = np.abs(got - want) / np.abs(want)
        i = int(np.argmax(err))
        if err[i] > worst:
            worst = float(err[i])
            if worst > rel_tol:
                bad = _sample_at(x, y, i)
    return CheckReport("homogeneity", worst <= rel_tol, max_rel_error=worst, failing_sample=bad)


def check_lower_product_bound(spec, samples):
    """``K(x, y) >= c1 (|x| |y|)^(gamma/2)``."""
    x, y = _as_samples(samples)
    k = spec.evaluate(x, y)
    bound = spec.params.c1 * (_sizes(x) * _sizes(y)) ** (spec.params.gamma / 2)
    ratio = k / bound
    ok = ratio >= 1 - REL_TOL_CHECK
    bad = None if ok.all() else _sample_at(x, y, int(np.argmin(ratio)))
    return CheckReport("lower_product_bound", bool(ok.all()), float(ratio.min()), float(ratio.max()),
                       failing_sample=bad)


def check_symmetry(spec, samples):
    x, y = _as_samples(samples)
    diff = np.abs(spec.evaluate(x, y) - spec.evaluate(y, x))
    ok = diff == 0
    bad = None if ok.all() else _sample_at(x, y, int(np.argmax(diff)))
    return CheckReport("symmetry", bool(ok.all()), max_rel_error=float(diff.max()), failing_sample=bad)


def check_all(spec, d, samples=None):
    """Run the full validation suite; returns a list of reports."""
    if samples is None:
        samples = default_samples(d)
    reports = [check_symmetry(spec, samples), check_bounds(spec, samples),
               check_homogeneity(spec, samples), check_lower_product_bound(spec, samples)]
    if isinstance(spec.family, RayConstant):
        grid = simplex_grid(d, 360 if d <= 3 else 36)
        q = spec.family.q(grid)
        lo, hi = q / spec.params.c1, q / spec.params.c2
        ok = (lo >= 1 - REL_TOL_CHECK) & (hi <= 1 + REL_TOL_CHECK)
        bad = None if ok.all() else (tuple(grid[int(np.argmin(ok))]),)
        reports.append(CheckReport("q_range", bool(ok.all()), float(lo.min()), float(hi.max()),
                                   failing_sample=bad))
    return reports

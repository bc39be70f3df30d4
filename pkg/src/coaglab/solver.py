"""Right-hand side and adaptive time integration of the discrete coagulation system.

    dn_a/dt = 1/2 sum_{b+c=a} K(b, c) n_b n_c  -  n_a sum_b K(a, b) n_b

restricted to ``1 <= |a| <= n_max``.  Products of a coagulation event with
``|b+c| > n_max`` are not stored; their mass rate is returned separately as
the escape flux so that ``sum_a a dn_a/dt + escape_flux = 0``.

Two interchangeable backends evaluate the right-hand side:

* ``sparse``: explicit enumeration of unordered support pairs, O(S^2) in the
  support size S, valid for every kernel;
* ``dense``: FFT convolution on the bounding box of the support, available
  for kernels with a finite separable expansion.

Time stepping uses the Dormand-Prince 5(4) pair with an RMS error norm over
the active entries.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.fft as sfft
from scipy.linalg.blas import daxpy

from .errors import ConfigError, EscapeAbort, StepSizeUnderflow
from .lattice import LatticeState, mass_vector

log = logging.getLogger(__name__)

DENSE_MAX_CELLS = 1 << 23

# Dormand-Prince 5(4) tableau
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_B = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_B_ERR = tuple(b - bs for b, bs in zip(
    _B, (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40)))
# continuous extension: y(t + s h) = y + h sum_j k_j sum_m P[j][m] s^(m+1)
_P = (
    (1.0, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432),
    (0.0, 0.0, 0.0, 0.0),
    (0.0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799),
    (0.0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072),
    (0.0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632),
    (0.0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844),
    (0.0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423),
)


def default_snapshot_times(t_end, count=40, t_first=1e-2):
    """``count`` log-spaced times on ``[max(t_first, 1e-2), t_end]`` plus ``t = 0``."""
    lo = max(t_first, 1e-2)
    if t_end <= lo:
        return (0.0, float(t_end))
    times = np.logspace(math.log10(lo), math.log10(t_end), count)
    times[-1] = t_end
    return (0.0,) + tuple(float(t) for t in times)


@dataclass(frozen=True)
class SolverConfig:
    t_end: float
    rel_tol: float = 1e-8
    abs_tol: float = 1e-14
    dt_init: float = 1e-4
    dt_max: float | None = None
    snapshot_times: tuple | None = None
    method: str = "dopri5"
    escape_abort_fraction: float = 0.01
    conservation_tol: float = 1e-8
    negative_floor: float | None = None
    backend: str = "auto"
    threads: int = 1
    max_steps: int = 10_000_000

    def __post_init__(self):
        if not (self.t_end > 0 and math.isfinite(self.t_end)):
            raise ConfigError("t_end must be positive and finite")
        if not (self.rel_tol > 0 and self.abs_tol > 0):
            raise ConfigError("rel_tol and abs_tol must be positive")
        if not self.dt_init > 0:
            raise ConfigError("dt_init must be positive")
        if self.dt_max is not None and self.dt_init > self.dt_max:
            raise ConfigError("dt_init must not exceed dt_max")
        if self.method != "dopri5":
            raise ConfigError(f"unknown method {self.method!r}; only 'dopri5' is available")
        if self.backend not in ("auto", "dense", "sparse"):
            raise ConfigError(f"unknown backend {self.backend!r}")
        if not self.escape_abort_fraction > 0:
            raise ConfigError("escape_abort_fraction must be positive")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.snapshot_times is not None:
            times = tuple(float(t) for t in self.snapshot_times)
            if any(b <= a for a, b in zip(times, times[1:])):
                raise ConfigError("snapshot_times must be strictly increasing")
            if times and (times[0] < 0 or times[-1] > self.t_end):
                raise ConfigError("snapshot_times must lie within [0, t_end]")
            object.__setattr__(self, "snapshot_times", times)

    @property
    def schedule(self):
        if self.snapshot_times is None:
            return default_snapshot_times(self.t_end)
        return self.snapshot_times

    @property
    def step_cap(self):
        return self.t_end if self.dt_max is None else self.dt_max

    @property
    def floor(self):
        return 1e-2 * self.abs_tol if self.negative_floor is None else self.negative_floor

    def to_dict(self):
        out = asdict(self)
        out["snapshot_times"] = list(self.schedule)
        return out

    def content_hash(self):
        import hashlib

        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


@dataclass
class Trajectory:
    """Snapshots in increasing time order plus provenance metadata."""

    states: list
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        times = [s.time for s in self.states]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("trajectory times must be strictly increasing")

    @property
    def times(self):
        return [s.time for s in self.states]

    def __len__(self):
        return len(self.states)

    def __iter__(self):
        return iter(self.states)

    def __getitem__(self, i):
        return self.states[i]

    def at(self, t, rtol=1e-9):
        """Snapshot whose time matches ``t``."""
        for s in self.states:
            if abs(s.time - t) <= rtol * max(1.0, abs(t)):
                return s
        raise KeyError(f"no snapshot at t={t}")

    @property
    def initial_mass(self):
        first = self.states[0]
        return mass_vector(first) + first.escaped_mass


# ----------------------------------------------------------------- backends


class DenseEngine:
    """FFT backend on a dense grid indexed by ``(|alpha|, alpha_1, ..., alpha_{d-1})``.

    The last component is implied by the size, so cells with
    ``alpha_1 + ... + alpha_{d-1} > |alpha|`` stay zero.  In these coordinates
    a product that wraps around a component axis has size above the kept
    range, so component axes need transform length ``K + 1`` for the largest
    kept size ``K = min(n_max, 2E)``, ``E`` being the largest occupied size.
    The size axis needs ``max(K + 1, 2E)``: when ``2E > n_max`` the one
    aliased index is an escaping product and lands on the empty row 0.
    """

    name = "dense"

    def __init__(self, kernel, d, n_max, threads=1):
        terms = kernel.separable_terms(d)
        if terms is None:
            raise ConfigError(f"kernel family {kernel.family.name} has no separable form; use the sparse backend")
        self.d, self.n_max, self.threads = d, n_max, threads
        shape = (n_max + 1,) * d
        if math.prod(shape) > 4 * DENSE_MAX_CELLS:
            raise ConfigError("lattice too large for the dense backend")
        idx = np.indices(shape)
        size = idx[0]
        comps = list(idx[1:]) + [size - idx[1:].sum(axis=0)]
        valid = comps[-1] >= 0
        self.inside = valid & (size >= 1)
        self.allowed = np.zeros(shape, dtype=bool)
        self.half_allowed = np.zeros(shape)
        self.coords = [np.where(valid, c, 0).astype(float) for c in comps]
        flat_alpha = np.stack([c[valid] for c in comps], axis=1)
        flat_size = size[valid]
        cache = {}
        self.terms = []
        for c, f, g in terms:
            for fn in (f, g):
                if id(fn) not in cache:
                    vals = fn(flat_alpha, flat_size)
                    if np.all(vals == 1.0):
                        # unit weights are stored as None and skipped
                        cache[id(fn)] = None
                    else:
                        w = np.zeros(shape)
                        w[valid] = vals
                        cache[id(fn)] = w
            self.terms.append((float(c), cache[id(f)], cache[id(g)], f is g))

    def cells(self, alphas):
        alphas = np.asarray(alphas, dtype=np.int64)
        return (alphas.sum(axis=1),) + tuple(alphas[:, : self.d - 1].T)

    def pairs(self, arr, mask):
        """Compositions (in lexicographic order) and values of ``arr`` where ``mask`` holds."""
        nz = np.nonzero(mask)
        head = np.stack(nz[1:], axis=1) if self.d > 1 else np.zeros((nz[0].size, 0), dtype=np.int64)
        alphas = np.concatenate([head, (nz[0] - head.sum(axis=1))[:, None]], axis=1)
        order = np.lexsort(alphas.T[::-1])
        return alphas[order], arr[nz][order]

    def from_state(self, state):
        y = np.zeros((self.n_max + 1,) * self.d)
        if len(state):
            y[self.cells(state.alphas)] = state.values
        self._extend_allowed(y != 0)
        return y

    def _lengths(self, ext):
        keep = min(self.n_max, 2 * ext)
        lens = [sfft.next_fast_len(max(2 * ext, keep + 1), real=self.d == 1)]
        lens += [sfft.next_fast_len(keep + 1, real=axis == self.d - 1) for axis in range(1, self.d)]
        return lens, keep

    def _extend_allowed(self, support):
        """Grow the mask of compositions reachable by merging supported ones.

        Gain outside this closure is pure FFT roundoff; masking it keeps, for
        instance, single-ray data exactly on its ray.
        """
        mask = self.allowed | support
        if not np.any(mask & ~self.allowed):
            return
        lens, keep = self._lengths(self.n_max)
        while True:
            f = self._forward(mask.astype(float), lens)
            conv = self._inverse(f * f, lens, [keep + 1] * self.d)
            grown = mask | ((conv > 0.5) & self.inside)
            if np.array_equal(grown, mask):
                break
            mask = grown
        self.allowed = mask
        self.half_allowed = 0.5 * mask

    def to_state(self, y, escaped, t):
        alphas, values = self.pairs(y, y != 0)
        return LatticeState(self.d, self.n_max, alphas, values, escaped.copy(), t, validate=False)

    def pad(self, arr):
        return arr

    def mass(self, y):
        return self._moments(y, len(y))

    def _moments(self, arr, rows):
        """``sum alpha_k arr`` for every component over the leading ``rows`` sizes."""
        if arr.shape[1:] == self.coords[0].shape[1:]:
            flat = arr.reshape(-1)
            return np.array([np.dot(c[:rows].reshape(-1), flat) for c in self.coords])
        region = tuple(slice(0, s) for s in arr.shape)
        return np.array([np.vdot(c[region], arr) for c in self.coords])

    def _forward(self, a, lens):
        # zero padding is applied axis by axis so padded rows are never transformed
        out = sfft.rfft(a, n=lens[-1], axis=-1, workers=self.threads)
        for axis in range(self.d - 1):
            out = sfft.fft(out, n=lens[axis], axis=axis, workers=self.threads, overwrite_x=True)
        return out

    def _inverse(self, spec, lens, keep):
        # only the leading ``keep`` indices of each axis are needed
        out = spec
        for axis in range(self.d - 1):
            out = sfft.ifft(out, n=lens[axis], axis=axis, workers=self.threads, overwrite_x=True)
            out = out[(slice(None),) * axis + (slice(0, keep[axis]),)]
        out = sfft.irfft(out, n=lens[-1], axis=-1, workers=self.threads)
        return np.ascontiguousarray(out[..., : keep[-1]])

    def rhs(self, y):
        d = self.d
        rows = np.flatnonzero(np.any(y.reshape(len(y), -1), axis=1))
        if rows.size == 0:
            return np.zeros_like(y), np.zeros(d)
        ext = int(rows[-1])
        sub = y[: ext + 1]
        lens, top = self._lengths(ext)
        keep = [top + 1] * d
        spec = None
        lossfac = 0.0
        for c, fa, ga, same in self.terms:
            fn = sub if fa is None else fa[: ext + 1] * sub
            ff = self._forward(fn, lens)
            if same:
                gn, fg = fn, ff
            else:
                gn = sub if ga is None else ga[: ext + 1] * sub
                fg = self._forward(gn, lens)
            term = ff * fg
            if c != 1.0:
                term *= c
            spec = term if spec is None else spec + term
            fsum, gsum = float(np.sum(fn)), float(np.sum(gn))
            lossfac = lossfac + 0.5 * c * ((1.0 if fa is None else fa[: ext + 1]) * gsum
                                           + (1.0 if ga is None else ga[: ext + 1]) * fsum)
        gain = self._inverse(spec, lens, keep)
        reach = tuple(slice(0, k) for k in keep)
        gain *= self.half_allowed[reach]
        loss = sub * lossfac
        # escape = loss mass rate minus retained gain mass rate (before clamping FFT noise)
        escape = self._moments(loss, ext + 1) - self._moments(gain, top + 1)
        np.maximum(gain, 0.0, out=gain)
        if gain.shape == y.shape:
            dy = gain
        else:
            dy = np.zeros_like(y)
            dy[reach] = gain
        dy[: ext + 1] -= loss
        return dy, escape


class SparseEngine:
    """Pair-enumeration backend on a growing set of compositions.

    Compositions are encoded as mixed-radix integers with base ``n_max + 1``.
    The key universe only grows (new keys are appended), so arrays aligned to
    an older universe are extended by zero padding.

    With ``ordered=True`` every pair contributes its two ordered halves
    ``K(a,b) n_a n_b / 2`` and ``K(b,a) n_b n_a / 2`` to the same slot, which
    is the literal ordered-pair form of the equation.
    """

    name = "sparse"

    def __init__(self, kernel, d, n_max, threads=1, chunk_pairs=1 << 20, ordered=False):
        if n_max is None:
            raise ConfigError("the sparse backend needs a finite n_max")
        self.kernel, self.d, self.n_max = kernel, d, n_max
        self.threads, self.chunk_pairs, self.ordered = threads, chunk_pairs, ordered
        base = n_max + 1
        if base**d >= 2**62:
            raise ConfigError("lattice too large to encode compositions as 64-bit keys")
        self.radix = base ** np.arange(d, dtype=np.int64)
        self.keys = np.zeros(0, dtype=np.int64)
        self.alphas = np.zeros((0, d), dtype=np.int64)
        self._sorted = self.keys
        self._order = np.zeros(0, dtype=np.int64)

    def encode(self, alphas):
        return np.asarray(alphas, dtype=np.int64) @ self.radix

    def decode(self, keys):
        base = self.n_max + 1
        out = np.empty((len(keys), self.d), dtype=np.int64)
        rest = np.asarray(keys, dtype=np.int64).copy()
        for k in range(self.d):
            out[:, k] = rest % base
            rest //= base
        return out

    def add_keys(self, keys):
        keys = np.unique(keys)
        if self.keys.size:
            pos = np.searchsorted(self._sorted, keys)
            pos = np.minimum(pos, self._sorted.size - 1)
            keys = keys[self._sorted[pos] != keys]
        if keys.size:
            self.keys = np.concatenate([self.keys, keys])
            self.alphas = np.concatenate([self.alphas, self.decode(keys)])
            self._order = np.argsort(self.keys, kind="stable")
            self._sorted = self.keys[self._order]

    def positions(self, keys):
        return self._order[np.searchsorted(self._sorted, keys)]

    def from_state(self, state):
        keys = self.encode(state.alphas)
        self.add_keys(keys)
        y = np.zeros(self.keys.size)
        y[self.positions(keys)] = state.values
        return y

    def to_state(self, y, escaped, t):
        y = self.pad(y)
        nz = np.flatnonzero(y)
        order = nz[np.argsort(self.keys[nz], kind="stable")]
        alphas = self.alphas[order]
        lex = np.lexsort(alphas.T[::-1]) if len(order) else order
        return LatticeState(self.d, self.n_max, alphas[lex], y[order][lex], escaped.copy(), t, validate=False)

    def pad(self, arr):
        extra = self.keys.size - arr.size
        return np.concatenate([arr, np.zeros(extra)]) if extra else arr

    def mass(self, y):
        y = self.pad(y)
        return y @ self.alphas.astype(float)

    def _chunks(self, m):
        counts = m - np.arange(m)
        bounds = [0]
        acc = 0
        for i, c in enumerate(counts.tolist()):
            if acc and acc + c > self.chunk_pairs:
                bounds.append(i)
                acc = 0
            acc += c
        bounds.append(m)
        return list(zip(bounds[:-1], bounds[1:]))

    def _pair_chunk(self, lo, hi, m, keys, alphas, sizes, vals):
        rows = np.arange(lo, hi)
        counts = m - rows
        total = int(counts.sum())
        starts = np.cumsum(counts) - counts
        I = np.repeat(rows, counts)
        J = np.arange(total) - np.repeat(starts, counts) + I
        ai, aj = alphas[I], alphas[J]
        kij = self.kernel.evaluate(ai, aj)
        prod = vals[I] * vals[J]
        diag = I == J
        if self.ordered:
            kji = self.kernel.evaluate(aj, ai)
            half_ij = 0.5 * (kij * prod)
            r = np.where(diag, half_ij, half_ij + 0.5 * (kji * prod))
        else:
            r = np.where(diag, 0.5, 1.0) * (kij * prod)
        loss = np.bincount(I, weights=r, minlength=m) + np.bincount(J, weights=r, minlength=m)
        inside = sizes[I] + sizes[J] <= self.n_max
        out = ~inside
        escape = np.array([np.sum((ai[out, k] + aj[out, k]) * r[out]) for k in range(self.d)],
                          dtype=float)
        gkeys = keys[I[inside]] + keys[J[inside]]
        uk, inv = np.unique(gkeys, return_inverse=True)
        gvals = np.bincount(inv, weights=r[inside], minlength=uk.size)
        return loss, escape, uk, gvals

    def rhs(self, y):
        y = self.pad(y)
        nz = np.flatnonzero(y)
        m = nz.size
        if m == 0:
            return np.zeros_like(y), np.zeros(self.d)
        keys, alphas = self.keys[nz], self.alphas[nz]
        sizes = alphas.sum(axis=1)
        vals = y[nz]
        chunks = self._chunks(m)
        work = lambda c: self._pair_chunk(c[0], c[1], m, keys, alphas.astype(float), sizes, vals)
        if self.threads > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                parts = list(pool.map(work, chunks))
        else:
            parts = [work(c) for c in chunks]
        loss = np.zeros(m)
        escape = np.zeros(self.d)
        for part in parts:
            loss += part[0]
            escape += part[1]
        allk = np.concatenate([p[2] for p in parts])
        allv = np.concatenate([p[3] for p in parts])
        uk, inv = np.unique(allk, return_inverse=True)
        gain = np.bincount(inv, weights=allv, minlength=uk.size)
        self.add_keys(uk)
        dy = np.zeros(self.keys.size)
        dy[nz] -= loss
        dy[self.positions(uk)] += gain
        return dy, escape


def choose_backend(kernel, d, n_max, backend="auto"):
    if backend == "auto":
        separable = kernel.separable_terms(d) is not None
        backend = "dense" if separable and (n_max + 1) ** d <= DENSE_MAX_CELLS else "sparse"
    return backend


def make_engine(kernel, d, n_max, backend="auto", threads=1):
    backend = choose_backend(kernel, d, n_max, backend)
    if backend == "dense":
        return DenseEngine(kernel, d, n_max, threads)
    return SparseEngine(kernel, d, n_max, threads)


@dataclass
class Derivative:
    """Sparse time derivative of a state plus the escape mass rate."""

    alphas: np.ndarray
    values: np.ndarray
    escape_flux: np.ndarray

    def as_dict(self):
        return {tuple(int(v) for v in a): float(x) for a, x in zip(self.alphas, self.values)}


def rhs(state, kernel, backend="sparse", threads=1):
    """Right-hand side on every composition reachable in one event."""
    if state.n_max is None:
        raise ConfigError("rhs needs a truncated state (finite n_max)")
    engine = make_engine(kernel, state.d, state.n_max, backend, threads)
    y = engine.from_state(state)
    dy, esc = engine.rhs(y)
    if isinstance(engine, DenseEngine):
        alphas, values = engine.pairs(dy, (dy != 0) | (y != 0))
    else:
        order = np.argsort(engine.keys, kind="stable")
        alphas, values = engine.alphas[order], dy[order]
    return Derivative(alphas, values, esc)


# --------------------------------------------------------------- integrator


def _axpy(a, x, y):
    """``y += a * x`` in place (one BLAS pass, no temporary)."""
    x = np.ascontiguousarray(x, dtype=float)
    if y.flags.c_contiguous and y.dtype == np.float64:
        daxpy(x.ravel(), y.ravel(), a=a)
    else:
        y += a * x


class _Stepper:
    def __init__(self, engine, state, config):
        self.engine = engine
        self.cfg = config
        self.y = engine.from_state(state)
        self.esc = np.asarray(state.escaped_mass, float).copy()
        self.t = state.time
        self.h = config.dt_init
        self.k1 = None
        self.last = None
        self.steps = self.rejected = self.rhs_calls = 0
        self.flushed = np.zeros(state.d)
        self.max_error = 0.0

    def _rhs(self, y):
        self.rhs_calls += 1
        return self.engine.rhs(y)

    def is_zero(self):
        return not np.any(self.y)

    def attempt(self, h):
        """One trial step of size ``h``; returns (ynew, escnew, err_norm, k7, e7)."""
        eng = self.engine
        if self.k1 is None:
            self.k1 = self._rhs(self.y)
        ks = [self.k1[0]]
        es = [self.k1[1]]
        for i in range(1, 7):
            yi = eng.pad(self.y).copy()
            for a, k in zip(_A[i], ks):
                if a:
                    _axpy(h * a, eng.pad(k), yi)
            k, e = self._rhs(yi)
            ks.append(k)
            es.append(e)
        ynew = eng.pad(yi)
        ks = [eng.pad(k) for k in ks]
        y = eng.pad(self.y)
        escnew = self.esc + h * sum(b * e for b, e in zip(_B, es))
        err = np.zeros_like(ynew)
        for b, k in zip(_B_ERR, ks):
            if b:
                _axpy(h * b, k, err)
        err_esc = h * sum(b * e for b, e in zip(_B_ERR, es) if b)
        active = (y != 0) | (ynew != 0)
        scale = self.cfg.abs_tol + self.cfg.rel_tol * np.maximum(np.abs(y[active]), np.abs(ynew[active]))
        scale_esc = self.cfg.abs_tol + self.cfg.rel_tol * np.maximum(np.abs(self.esc), np.abs(escnew))
        ratios = np.concatenate([(err[active] / scale), err_esc / scale_esc])
        norm = float(np.sqrt(np.mean(ratios**2))) if ratios.size else 0.0
        return ynew, escnew, norm, ks, es

    def advance(self, t_stop):
        """Take one accepted step without passing ``t_stop``."""
        cfg = self.cfg
        if self.is_zero():
            self.t = t_stop
            return
        while True:
            h = min(self.h, cfg.step_cap, t_stop - self.t)
            clipped = h >= t_stop - self.t
            if h < 1e-14 * max(self.t, cfg.dt_init):
                raise StepSizeUnderflow(f"step size {h:g} underflow at t={self.t:g}")
            ynew, escnew, err, ks, es = self.attempt(h)
            lowest = float(ynew.min()) if ynew.size else 0.0
            if err <= 1.0 and lowest >= -cfg.floor:
                break
            self.rejected += 1
            if err <= 1.0:
                self.h = 0.5 * h
            else:
                self.h = h * max(0.2, 0.9 * err ** -0.2)
        self.last = (self.t, h, self.engine.pad(self.y), self.esc, ks, es)
        neg = ynew < 0
        if neg.any():
            # entries in [-floor, 0) are roundoff at the support frontier; the
            # last stage derivative is kept since the change is below abs_tol
            part = np.where(neg, -ynew, 0.0)
            self.flushed += self.engine.mass(part)
            ynew[neg] = 0.0
        self.k1 = (ks[6], es[6])
        self.y, self.esc = ynew, escnew
        self.t = t_stop if clipped else self.t + h
        self.steps += 1
        self.max_error = max(self.max_error, err)
        grow = 5.0 if err == 0 else min(5.0, max(0.2, 0.9 * err ** -0.2))
        self.h = h * grow if not clipped or grow < 1 else max(self.h, h * grow)
        if self.steps > cfg.max_steps:
            raise StepSizeUnderflow("maximum number of steps exceeded")

    def state(self):
        return self.engine.to_state(self.y, self.esc, self.t)

    def interpolate(self, t):
        """State at ``t`` inside the last accepted step from the continuous extension."""
        t0, h, y0, esc0, ks, es = self.last
        sig = (t - t0) / h
        powers = [sig ** (m + 1) for m in range(4)]
        y = self.engine.pad(y0).copy()
        esc = esc0.copy()
        for row, k, e in zip(_P, ks, es):
            w = h * sum(c * p for c, p in zip(row, powers))
            if w:
                y += w * self.engine.pad(k)
                esc += w * e
        y[y < 0] = 0.0
        return self.engine.to_state(y, esc, t)


def _check_kernel(kernel, d):
    kernel.params.require_no_gelation()
    kernel.validate(d)


def step(state, kernel, config, h=None):
    """One accepted adaptive step; returns ``(new_state, h_used, error_norm)``."""
    _check_kernel(kernel, state.d)
    engine = make_engine(kernel, state.d, state.n_max, config.backend, config.threads)
    st = _Stepper(engine, state, config)
    if st.is_zero():
        cap = config.step_cap
        return state.replace(time=state.time + cap, validate=False), cap, 0.0
    if h is not None:
        st.h = h
    t0 = st.t
    st.advance(t0 + config.step_cap)
    return st.state(), st.t - t0, st.max_error


def run(initial, kernel, config, config_hash=None):
    """Integrate from ``initial.time`` to ``config.t_end``, recording snapshots."""
    if initial.n_max is None:
        raise ConfigError("deterministic runs need a finite n_max")
    _check_kernel(kernel, initial.d)
    engine = make_engine(kernel, initial.d, initial.n_max, config.backend, config.threads)
    st = _Stepper(engine, initial, config)
    m0 = mass_vector(initial) + initial.escaped_mass
    m0_norm = float(np.sum(m0))
    schedule = [t for t in config.schedule if t >= initial.time]
    states = []
    defect = 0.0

    def provenance(status):
        return {
            "status": status,
            "backend": engine.name,
            "config_hash": config_hash or config.content_hash(),
            "kernel_hash": kernel.content_hash(),
            "steps": st.steps,
            "rejected_steps": st.rejected,
            "rhs_evaluations": st.rhs_calls,
            "initial_mass": m0.tolist(),
            "escaped_mass": st.esc.tolist(),
            "flushed_negative_mass": st.flushed.tolist(),
            "mass_defect": defect,
            "conservation_tol": config.conservation_tol,
            "conservation_ok": defect <= config.conservation_tol,
        }

    def record(s):
        nonlocal defect
        if m0_norm > 0:
            rel = np.abs(mass_vector(s) + s.escaped_mass - m0) / m0_norm
            defect = max(defect, float(rel.max()))
        states.append(s)

    pending = list(schedule)
    while pending and pending[0] <= st.t:
        pending.pop(0)
        record(st.state())
    while pending:
        if st.is_zero():
            for t in pending:
                record(st.state().replace(time=t, validate=False))
            break
        st.advance(config.t_end)
        while pending and pending[0] <= st.t:
            t = pending.pop(0)
            record(st.state() if t == st.t else st.interpolate(t))
        if m0_norm > 0 and float(np.sum(st.esc)) > config.escape_abort_fraction * m0_norm:
            traj = Trajectory(states, provenance("escape_abort"))
            raise EscapeAbort(
                f"escaped mass {float(np.sum(st.esc)):.3g} exceeds "
                f"{config.escape_abort_fraction:g} of m0 at t={st.t:.6g}; increase n_max",
                traj,
            )
        log.debug("t=%g steps=%d rejected=%d", st.t, st.steps, st.rejected)
    return Trajectory(states, provenance("ok"))

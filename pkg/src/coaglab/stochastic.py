"""Direct stochastic simulation of the finite coalescing particle system.

Every unordered pair of particles ``(i, j)`` merges at rate ``K(x_i, x_j)/V``.
The simulator keeps per-particle rate sums ``R_i = sum_{j != i} K(x_i, x_j)/V``
so that the total rate is ``sum(R)/2``; an event picks ``i`` with probability
proportional to ``R_i`` and then ``j`` proportional to ``K(x_i, x_j)``.

Random numbers come from numpy's PCG64 generator.  A run seeded with ``seed``
uses ``PCG64(SeedSequence(seed))``; the ``k``-th run of an ensemble built from
a single base seed uses ``SeedSequence(base, spawn_key=(k,))``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError
from .lattice import LatticeState


def make_rng(seed, run_index=None):
    seq = np.random.SeedSequence(seed) if run_index is None else np.random.SeedSequence(seed, spawn_key=(run_index,))
    return np.random.Generator(np.random.PCG64(seq))


@dataclass
class ParticleSystem:
    particles: np.ndarray
    volume: float
    time: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        self.particles = np.asarray(self.particles, dtype=np.int64)
        if self.particles.ndim != 2:
            raise DomainError("particles must be an (N, d) integer array")
        if np.any(self.particles < 0) or np.any(self.particles.sum(axis=1) < 1):
            raise DomainError("every particle must be a nonzero composition")
        if not self.volume > 0:
            raise ConfigError("volume must be positive")

    @property
    def count(self):
        return len(self.particles)


@dataclass
class SSAResult:
    """Recorded empirical states plus event bookkeeping for one run."""

    states: list
    seed: int
    events: int
    initial_count: int
    final_count: int
    extinct: bool = False
    extinction_time: float | None = None
    mass_counts: list = field(default_factory=list)

    def __iter__(self):
        return iter(self.states)

    def __len__(self):
        return len(self.states)

    def __getitem__(self, i):
        return self.states[i]


def expand_counts(initial_counts, d=None):
    """Particle array from a mapping ``composition -> count``."""
    items = sorted((tuple(int(v) for v in a), int(c)) for a, c in dict(initial_counts).items())
    if not items:
        raise ConfigError("initial particle counts are empty")
    d = len(items[0][0]) if d is None else d
    if any(len(a) != d for a, _ in items) or any(c < 0 for _, c in items):
        raise ConfigError("initial counts need d-dimensional compositions and nonnegative counts")
    rows = [np.repeat(np.asarray(a, dtype=np.int64)[None, :], c, axis=0) for a, c in items if c]
    if not rows:
        raise ConfigError("initial particle counts are all zero")
    return np.concatenate(rows)


def counts_from_state(state, total):
    """Round ``n_alpha`` to integer counts summing to ``total`` (largest remainder)."""
    if total < 1:
        raise ConfigError("particle count must be >= 1")
    share = state.values / state.values.sum() * total
    base = np.floor(share).astype(np.int64)
    short = int(total - base.sum())
    order = np.lexsort((np.arange(len(share)), -(share - base)))
    base[order[:short]] += 1
    return {tuple(int(v) for v in a): int(c) for a, c in zip(state.alphas, base) if c}


def _empirical(particles, volume, d, t):
    if len(particles) == 0:
        return LatticeState(d, None, np.zeros((0, d), dtype=np.int64), np.zeros(0), time=t, validate=False)
    alphas, counts = np.unique(particles, axis=0, return_counts=True)
    return LatticeState(d, None, alphas, counts / volume, time=t, validate=False)


def _rate_sums(kernel, x, volume, block=256):
    n = len(x)
    xf = x.astype(float)
    out = np.empty(n)
    for lo in range(0, n, block):
        hi = min(n, lo + block)
        k = kernel.evaluate(xf[lo:hi, None, :], xf[None, :, :])
        k[np.arange(hi - lo), np.arange(lo, hi)] = 0.0
        out[lo:hi] = k.sum(axis=1) / volume
    return out


def ssa_run(initial_counts, volume, kernel, seed, t_end, record_times, run_index=None):
    """Simulate until ``t_end``; record empirical concentrations at ``record_times``."""
    x = expand_counts(initial_counts) if not isinstance(initial_counts, np.ndarray) else initial_counts.copy()
    system = ParticleSystem(x, volume, 0.0, seed)
    d = x.shape[1]
    record = sorted(float(t) for t in record_times)
    if any(t < 0 or t > t_end for t in record):
        raise ConfigError("record times must lie within [0, t_end]")
    rng = make_rng(seed, run_index)
    n = system.count
    initial = n
    mass0 = x.sum(axis=0)
    xf = x.astype(float)
    rates = _rate_sums(kernel, x, volume) if n > 1 else np.zeros(n)
    states, masses = [], []
    t = 0.0
    events = 0
    extinct_at = None
    nxt = 0

    def snap(time):
        live = x[:n]
        states.append(_empirical(live, volume, d, time))
        masses.append(live.sum(axis=0).tolist())

    while nxt < len(record):
        if n < 2:
            extinct_at = t if extinct_at is None else extinct_at
            while nxt < len(record):
                snap(record[nxt])
                nxt += 1
            break
        live_rates = rates[:n]
        total2 = float(live_rates.sum())
        if not total2 > 0:
            extinct_at = t
            continue
        t_next = t + rng.exponential(2.0 / total2)
        while nxt < len(record) and record[nxt] < t_next:
            snap(record[nxt])
            nxt += 1
        if t_next > t_end or nxt >= len(record):
            break
        t = t_next
        cum = np.cumsum(live_rates)
        i = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
        i = min(i, n - 1)
        row_i = kernel.evaluate(xf[i][None, :], xf[:n]) / volume
        row_i[i] = 0.0
        cum = np.cumsum(row_i)
        j = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
        j = min(j, n - 1)
        if j == i:
            j = int(np.flatnonzero(row_i > 0)[-1])
        row_j = kernel.evaluate(xf[j][None, :], xf[:n]) / volume
        row_j[j] = 0.0
        rates[:n] -= row_i + row_j
        merged = x[i] + x[j]
        last = n - 1
        # drop j by moving the last particle into its slot
        x[j], xf[j], rates[j] = x[last], xf[last], rates[last]
        if i == last:
            i = j
        n -= 1
        x[i] = merged
        xf[i] = merged
        row_new = kernel.evaluate(xf[i][None, :], xf[:n]) / volume
        row_new[i] = 0.0
        rates[:n] += row_new
        rates[i] = row_new.sum()
        events += 1
    if extinct_at is None and n < 2:
        extinct_at = t
    for m in masses:
        if np.any(np.asarray(m) != mass0):
            raise AssertionError("particle mass not conserved")
    return SSAResult(states, int(seed), events, initial, n, extinct_at is not None, extinct_at, masses)


@dataclass
class EnsembleStats:
    time: float
    alphas: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray
    runs: int

    def mean_state(self):
        return LatticeState(self.alphas.shape[1], None, self.alphas, self.mean, time=self.time, validate=False)

    def lookup(self, alpha):
        hit = np.flatnonzero(np.all(self.alphas == np.asarray(alpha), axis=1))
        if not hit.size:
            return 0.0, 0.0
        return float(self.mean[hit[0]]), float(self.stderr[hit[0]])


def ensemble_stats(runs):
    """Componentwise mean and standard error over runs at a common time."""
    if len(runs) < 2:
        raise DomainError("ensemble statistics need at least two runs")
    t = runs[0].time
    if any(r.time != t for r in runs):
        raise DomainError("runs have mismatched record times")
    d = runs[0].d
    alphas = np.unique(np.concatenate([r.alphas for r in runs]).reshape(-1, d), axis=0)
    index = {tuple(a): i for i, a in enumerate(alphas.tolist())}
    table = np.zeros((len(runs), len(alphas)))
    for k, r in enumerate(runs):
        idx = [index[tuple(a)] for a in r.alphas.tolist()]
        table[k, idx] = r.values
    mean = table.mean(axis=0)
    # shifting by the first run keeps identical runs at exactly zero spread
    stderr = (table - table[0]).std(axis=0, ddof=1) / np.sqrt(len(runs))
    return EnsembleStats(t, alphas, mean, stderr, len(runs))

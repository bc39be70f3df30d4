"""Concentration fields on the truncated composition lattice.

A :class:`LatticeState` stores the nonzero part of ``n_alpha`` as a pair of
arrays (compositions as rows of an integer matrix, concentrations as a float
vector) together with the mass that has left the lattice through the
truncation boundary ``|alpha| <= n_max``.
"""

from __future__ import annotations

import io
import itertools
import json
import os
from dataclasses import dataclass

import numpy as np

from ._fs import atomic_write_text
from .errors import ConfigError, DomainError, SnapshotError


@dataclass(frozen=True)
class Composition:
    alpha: tuple

    def __post_init__(self):
        alpha = tuple(int(a) for a in self.alpha)
        if any(a < 0 for a in alpha) or not any(alpha):
            raise DomainError(f"invalid composition {alpha}")
        object.__setattr__(self, "alpha", alpha)

    @property
    def size(self) -> int:
        return sum(self.alpha)


@dataclass(frozen=True)
class MomentReport:
    k: float
    value: float
    time: float


class LatticeState:
    """Immutable sparse snapshot of ``n_alpha`` at one time.

    ``n_max=None`` means no truncation (empirical states of the particle
    simulator).  Rows of ``alphas`` are unique; order is not significant.
    """

    __slots__ = ("d", "n_max", "alphas", "values", "escaped_mass", "time")

    def __init__(self, d, n_max, alphas, values, escaped_mass=None, time=0.0, validate=True):
        alphas = np.asarray(alphas, dtype=np.int64).reshape(-1, d)
        values = np.asarray(values, dtype=float).reshape(-1)
        escaped = np.zeros(d) if escaped_mass is None else np.asarray(escaped_mass, float).reshape(d)
        object.__setattr__(self, "d", int(d))
        object.__setattr__(self, "n_max", None if n_max is None else int(n_max))
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "escaped_mass", escaped)
        object.__setattr__(self, "time", float(time))
        alphas.setflags(write=False)
        values.setflags(write=False)
        escaped.setflags(write=False)
        if validate:
            self._validate()

    def __setattr__(self, name, value):
        raise AttributeError("LatticeState is immutable")

    def __getstate__(self):
        return {name: getattr(self, name) for name in self.__slots__}

    def __setstate__(self, state):
        if isinstance(state, tuple):
            state = state[1]
        for name, value in state.items():
            object.__setattr__(self, name, value)

    def _validate(self):
        if self.d < 1:
            raise DomainError("dimension must be >= 1")
        if self.alphas.shape[0] != self.values.shape[0]:
            raise DomainError("alphas and values differ in length")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise DomainError("concentrations must be finite and nonnegative")
        if np.any(self.alphas < 0):
            raise DomainError("compositions must have nonnegative entries")
        sizes = self.sizes
        if np.any(sizes < 1):
            raise DomainError("the origin is not a composition")
        if self.n_max is not None and np.any(sizes > self.n_max):
            raise DomainError(f"composition larger than n_max={self.n_max}")
        if self.time < 0:
            raise DomainError("time must be nonnegative")
        if len(self.alphas) > 1:
            if len(np.unique(self.alphas, axis=0)) != len(self.alphas):
                raise DomainError("duplicate compositions")

    # ------------------------------------------------------------------ views
    @property
    def sizes(self):
        return self.alphas.sum(axis=1)

    def __len__(self):
        return len(self.values)

    def as_dict(self):
        return {tuple(int(v) for v in a): float(n) for a, n in zip(self.alphas, self.values)}

    def get(self, alpha, default=0.0):
        alpha = np.asarray(alpha, dtype=np.int64)
        hit = np.flatnonzero(np.all(self.alphas == alpha, axis=1))
        return float(self.values[hit[0]]) if hit.size else default

    def replace(self, validate=True, **changes):
        fields = {"d": self.d, "n_max": self.n_max, "alphas": self.alphas, "values": self.values,
                  "escaped_mass": self.escaped_mass, "time": self.time}
        fields.update(changes)
        return LatticeState(validate=validate, **fields)

    def pruned(self):
        keep = self.values != 0
        return LatticeState(self.d, self.n_max, self.alphas[keep], self.values[keep],
                            self.escaped_mass, self.time, validate=False)

    def sorted(self):
        """Copy with rows in lexicographic order of ``alpha``."""
        order = np.lexsort(self.alphas.T[::-1]) if len(self) else np.arange(0)
        return LatticeState(self.d, self.n_max, self.alphas[order], self.values[order],
                            self.escaped_mass, self.time, validate=False)

    @classmethod
    def from_mapping(cls, d, n_max, mapping, escaped_mass=None, time=0.0):
        items = sorted(mapping.items())
        alphas = np.array([a for a, _ in items], dtype=np.int64).reshape(-1, d)
        values = np.array([v for _, v in items], dtype=float)
        return cls(d, n_max, alphas, values, escaped_mass, time)

    def __repr__(self):
        return (f"LatticeState(d={self.d}, n_max={self.n_max}, support={len(self)}, "
                f"t={self.time!r}, mass={mass_vector(self).tolist()})")


def init_monomer_mix(d, weights, n_max):
    """Monomers only: ``n_{e_i} = weights[i]``."""
    w = np.asarray(weights, dtype=float).reshape(-1)
    if w.shape[0] != d:
        raise ConfigError(f"need {d} weights, got {w.shape[0]}")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ConfigError("monomer weights must be finite and nonnegative")
    if not np.any(w > 0):
        raise ConfigError("at least one monomer weight must be positive")
    if n_max is not None and n_max < 1:
        raise ConfigError("n_max must be >= 1")
    idx = np.flatnonzero(w > 0)
    alphas = np.eye(d, dtype=np.int64)[idx]
    return LatticeState(d, n_max, alphas, w[idx])


def _support(state):
    # explicit zeros are skipped so pruning never changes a reduction, even in the last bit
    keep = state.values != 0
    return state.alphas[keep], state.values[keep]


def mass_vector(state):
    """Componentwise mass ``sum alpha n_alpha`` on the lattice."""
    alphas, values = _support(state)
    if len(values) == 0:
        return np.zeros(state.d)
    return values @ alphas.astype(float)


def total_mass(state):
    return float(np.sum(mass_vector(state)))


def moment(state, k):
    """``M_k = sum |alpha|^k n_alpha`` over the stored support."""
    alphas, values = _support(state)
    if len(values) == 0:
        return MomentReport(float(k), 0.0, state.time)
    sizes = alphas.sum(axis=1).astype(float)
    return MomentReport(float(k), float(np.sum(sizes**k * values)), state.time)


def split_moment(state, gamma, p):
    """Pair ``(sum_{|a|>=1} |a|^(gamma+p) n_a, sum_{|a|<=1} |a|^(1-p) n_a)``."""
    alphas, values = _support(state)
    if len(values) == 0:
        return 0.0, 0.0
    sizes = alphas.sum(axis=1).astype(float)
    first = float(np.sum(sizes ** (gamma + p) * values))
    mono = sizes <= 1
    second = float(np.sum(sizes[mono] ** (1 - p) * values[mono]))
    return first, second


# ------------------------------------------------------------ persistence


def snapshot_header(d):
    return ",".join([f"alpha_{i + 1}" for i in range(d)] + ["n"])


def snapshot_csv_text(state):
    """CSV body in lexicographic composition order, floats in shortest round-trip form."""
    s = state.sorted()
    cols = [c.tolist() for c in s.alphas.T] + [s.values.tolist()]
    # one batched format call; %r is the shortest round-trip repr
    row = "%d," * s.d + "%r\n"
    body = (row * len(s.values)) % tuple(itertools.chain.from_iterable(zip(*cols)))
    return snapshot_header(s.d) + "\n" + body


def snapshot_sidecar(state):
    return {"d": state.d, "n_max": state.n_max, "time": state.time,
            "escaped_mass": state.escaped_mass.tolist()}


def dump_snapshot(state, csv_path):
    """Write ``<name>.csv`` and its ``<name>.json`` sidecar atomically."""
    csv_path = os.fspath(csv_path)
    atomic_write_text(csv_path, snapshot_csv_text(state))
    side = os.path.splitext(csv_path)[0] + ".json"
    atomic_write_text(side, json.dumps(snapshot_sidecar(state), sort_keys=True, indent=1) + "\n")
    return csv_path, side


def load_snapshot(csv_path):
    csv_path = os.fspath(csv_path)
    side = os.path.splitext(csv_path)[0] + ".json"
    try:
        with open(side) as fh:
            meta = json.load(fh)
        d = int(meta["d"])
        n_max = meta["n_max"]
        with open(csv_path) as fh:
            header = fh.readline().strip()
            if header != snapshot_header(d):
                raise SnapshotError(f"{csv_path}: unexpected header {header!r}")
            body = fh.read()
    except FileNotFoundError as exc:
        raise SnapshotError(f"missing snapshot file {exc.filename}") from exc
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise SnapshotError(f"corrupt snapshot sidecar {side}: {exc}") from exc
    try:
        if body.strip():
            # loadtxt parses floats with correct rounding, so repr-written values come back bit-exact
            data = np.loadtxt(io.StringIO(body), delimiter=",", dtype=float, ndmin=2)
        else:
            data = np.zeros((0, d + 1))
        if data.shape[1] != d + 1:
            raise ValueError("wrong column count")
        alphas = data[:, :d].astype(np.int64)
        if not np.array_equal(alphas, data[:, :d]):
            raise ValueError("non-integer composition")
        return LatticeState(d, n_max, alphas, data[:, d].copy(), meta["escaped_mass"], meta["time"])
    except (ValueError, DomainError) as exc:
        raise SnapshotError(f"corrupt snapshot {csv_path}: {exc}") from exc

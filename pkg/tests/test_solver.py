from __future__ import annotations

import numpy as np
import pytest

from coaglab.errors import ConfigError, EscapeAbort
from coaglab.kernel import KernelSpec, QForm
from coaglab.lattice import LatticeState, init_monomer_mix, mass_vector, moment
from coaglab.solver import DenseEngine, SolverConfig, SparseEngine, rhs, run, step

KERNELS = {
    "constant": KernelSpec.constant(2.0),
    "additive": KernelSpec.additive(),
    "product": KernelSpec.product(),
    "power_law": KernelSpec.power_law_pair(0.5, 0.25),
    "ray": KernelSpec.ray_constant(QForm(1.0, (1.0, 0.0), ((0.0, 0.0), (0.0, 0.0)))),
}


def kernel_for(name, d):
    if name != "ray":
        return KERNELS[name]
    lin = tuple(0.5 if i == 0 else 0.0 for i in range(d))
    return KernelSpec.ray_constant(QForm(1.0, lin, ((0.0,) * d,) * d))


def random_state(d, n_max, count, seed):
    rng = np.random.default_rng(seed)
    alphas = np.unique(rng.integers(0, n_max // d + 1, size=(count, d)), axis=0)
    alphas = alphas[(alphas.sum(axis=1) >= 1) & (alphas.sum(axis=1) <= n_max)]
    return LatticeState(d, n_max, alphas, rng.random(len(alphas)))


class TestRhs:
    def test_monomers_only(self):
        der = rhs(LatticeState(1, 10, [[1]], [1.0]), KernelSpec.constant(1.0))
        assert der.as_dict() == {(1,): -1.0, (2,): 0.5}

    def test_two_species(self):
        a, b = 0.7, 0.3
        der = rhs(init_monomer_mix(2, [a, b], 10), KernelSpec.constant(1.0))
        assert der.as_dict()[(1, 1)] == pytest.approx(a * b, rel=1e-15)

    def test_number_identity_for_constant_kernel(self):
        s = random_state(1, 200, 60, 0).replace(n_max=400)
        der = rhs(s, KernelSpec.constant(2.0))
        assert der.values.sum() == pytest.approx(-s.values.sum() ** 2, rel=1e-12)

    @pytest.mark.parametrize("name", sorted(KERNELS))
    @pytest.mark.parametrize("d", [1, 2, 3])
    def test_conservation_with_escape(self, name, d):
        s = random_state(d, 24, 80, d)
        der = rhs(s, kernel_for(name, d))
        flux = der.values @ der.alphas.astype(float) + der.escape_flux
        scale = np.abs(der.values) @ der.alphas.astype(float)
        assert np.all(np.abs(flux) <= 1e-12 * scale)
        assert np.all(der.escape_flux > 0)

    @pytest.mark.parametrize("name", sorted(KERNELS))
    def test_dense_matches_sparse(self, name):
        s = random_state(2, 30, 120, 7)
        a = rhs(s, KERNELS[name], backend="sparse")
        b = rhs(s, KERNELS[name], backend="dense")
        da, db = a.as_dict(), b.as_dict()
        scale = max(abs(v) for v in da.values())
        for key in set(da) | set(db):
            assert da.get(key, 0.0) == pytest.approx(db.get(key, 0.0), abs=1e-13 * scale)
        assert np.allclose(a.escape_flux, b.escape_flux, rtol=1e-12)

    def test_ordered_pairs_bit_identical(self):
        s = random_state(2, 40, 150, 11)
        for kernel in KERNELS.values():
            outs = []
            for ordered in (False, True):
                eng = SparseEngine(kernel, 2, 40, chunk_pairs=500, ordered=ordered)
                y = eng.from_state(s)
                dy, esc = eng.rhs(y)
                outs.append((eng.keys.copy(), dy, esc))
            assert np.array_equal(outs[0][0], outs[1][0])
            assert outs[0][1].tobytes() == outs[1][1].tobytes()
            assert outs[0][2].tobytes() == outs[1][2].tobytes()

    def test_threads_do_not_change_bits(self):
        s = random_state(2, 40, 150, 5)
        k = KERNELS["power_law"]
        outs = []
        for threads in (1, 3):
            eng = SparseEngine(k, 2, 40, threads=threads, chunk_pairs=300)
            dy, esc = eng.rhs(eng.from_state(s))
            outs.append((dy.tobytes(), esc.tobytes()))
        assert outs[0] == outs[1]
        eng = SparseEngine(k, 2, 40, chunk_pairs=1 << 20)
        dy, _ = eng.rhs(eng.from_state(s))
        assert np.allclose(np.frombuffer(outs[0][0]), dy, rtol=1e-12, atol=1e-15)

    def test_dense_rejects_non_separable(self):
        table = KernelSpec.homogeneous_table([0.1, 0.9], [1.0, 1.0], 0.0, 0.0, 1.0, 1.0)
        with pytest.raises(ConfigError):
            DenseEngine(table, 1, 16).rhs(np.zeros(17))


class TestStep:
    def test_zero_state(self):
        empty = LatticeState(1, 10, np.zeros((0, 1)), [])
        cfg = SolverConfig(t_end=5.0, dt_max=0.5)
        new, h, err = step(empty, KernelSpec.constant(), cfg)
        assert h == 0.5 and len(new) == 0 and err == 0.0

    def test_small_step_conserves_mass(self):
        s = LatticeState(1, 64, [[1]], [1.0])
        cfg = SolverConfig(t_end=1.0, dt_max=1e-3, rel_tol=1e-10)
        new, h, err = step(s, KernelSpec.constant(2.0), cfg)
        assert 0 < h <= 1e-3 and err <= 1.0
        assert moment(new, 0).value < 1.0
        assert mass_vector(new)[0] + new.escaped_mass[0] == pytest.approx(1.0, abs=1e-14)
        assert np.all(new.values >= 0)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            SolverConfig(t_end=0.0)
        with pytest.raises(ConfigError):
            SolverConfig(t_end=1.0, snapshot_times=(0.5, 0.2))
        with pytest.raises(ConfigError):
            SolverConfig(t_end=1.0, dt_init=1.0, dt_max=0.1)


class TestRun:
    def test_riccati_closed_form(self):
        cfg = SolverConfig(t_end=10.0, rel_tol=1e-10, snapshot_times=tuple(np.linspace(0, 10, 21)))
        tr = run(LatticeState(1, 1024, [[1]], [1.0]), KernelSpec.constant(2.0), cfg)
        for s in tr:
            assert moment(s, 0).value == pytest.approx(1.0 / (1.0 + s.time), rel=1e-6)
        assert tr.provenance["conservation_ok"]

    def test_constant_kernel_number_in_two_components(self):
        cfg = SolverConfig(t_end=1.0, rel_tol=1e-10, snapshot_times=(0.0, 0.5, 1.0))
        tr = run(init_monomer_mix(2, [0.7, 0.3], 64), KernelSpec.constant(1.0), cfg)
        # K = c gives dM0/dt = -(c/2) M0^2
        assert moment(tr.at(1.0), 0).value == pytest.approx(1.0 / 1.5, rel=1e-8)

    def test_symmetric_data_stays_symmetric(self):
        cfg = SolverConfig(t_end=5.0, rel_tol=1e-9, snapshot_times=(5.0,))
        tr = run(init_monomer_mix(2, [0.5, 0.5], 64), KernelSpec.constant(1.0), cfg)
        d = tr[-1].as_dict()
        for (i, j), v in d.items():
            assert d.get((j, i), 0.0) == pytest.approx(v, rel=1e-9, abs=1e-15)

    def test_permutation_equivariance(self):
        q = QForm(1.0, (0.5, 0.2, 0.0), ((0.0,) * 3,) * 3)
        qp = QForm(1.0, (0.2, 0.0, 0.5), ((0.0,) * 3,) * 3)
        cfg = SolverConfig(t_end=2.0, rel_tol=1e-9, snapshot_times=(2.0,))
        a = run(init_monomer_mix(3, [0.5, 0.3, 0.2], 12), KernelSpec.ray_constant(q), cfg)[-1].as_dict()
        b = run(init_monomer_mix(3, [0.3, 0.2, 0.5], 12), KernelSpec.ray_constant(qp), cfg)[-1].as_dict()
        for (i, j, k), v in a.items():
            assert b[(j, k, i)] == pytest.approx(v, rel=1e-7, abs=1e-14)

    def test_positivity_along_trajectory(self):
        cfg = SolverConfig(t_end=20.0, rel_tol=1e-6, snapshot_times=tuple(np.linspace(0, 20, 11)))
        tr = run(init_monomer_mix(2, [0.7, 0.3], 256), KernelSpec.constant(1.0), cfg)
        assert all(np.all(s.values >= 0) for s in tr)

    def test_escape_abort_on_tiny_lattice(self):
        cfg = SolverConfig(t_end=1000.0, rel_tol=1e-6)
        with pytest.raises(EscapeAbort) as info:
            run(LatticeState(1, 8, [[1]], [1.0]), KernelSpec.constant(1.0), cfg)
        partial = info.value.trajectory
        assert partial is not None and partial.provenance["status"] == "escape_abort"

    def test_gelling_kernel_rejected(self):
        with pytest.raises(ConfigError, match="no-gelation"):
            run(LatticeState(1, 8, [[1]], [1.0]), KernelSpec.additive(), SolverConfig(t_end=1.0))

    def test_moment_two_grows_linearly(self):
        cfg = SolverConfig(t_end=100.0, rel_tol=1e-7, snapshot_times=tuple(np.geomspace(10, 100, 6)))
        tr = run(LatticeState(1, 2048, [[1]], [1.0]), KernelSpec.constant(1.0), cfg)
        ratios = [moment(s, 2).value / s.time for s in tr]
        # exact: M2 = 1 + t for K = 1 and unit monomers
        assert ratios == pytest.approx([(1 + s.time) / s.time for s in tr], rel=1e-4)

from __future__ import annotations

import numpy as np
import pytest

from coaglab.errors import ConfigError, DomainError
from coaglab.kernel import (
    KernelParams,
    KernelSpec,
    QForm,
    check_all,
    check_bounds,
    check_homogeneity,
    check_lower_product_bound,
    default_samples,
    eval_kernel,
    phi_p,
)

Q_LINEAR = QForm(1.0, (1.0, 0.0), ((0.0, 0.0), (0.0, 0.0)))


def lattice_pairs(d=2, top=2048):
    sizes = 2.0 ** np.arange(int(np.log2(top)) + 1)
    return default_samples(d, sizes, 4)


class TestEvaluation:
    def test_constant(self):
        assert eval_kernel(KernelSpec.constant(1.0), (1, 0), (0, 3)) == 1.0

    def test_additive_uses_one_norm(self):
        assert eval_kernel(KernelSpec.additive(), (1, 0), (0, 2)) == 3.0

    def test_ray_constant_on_a_ray(self):
        spec = KernelSpec.ray_constant(Q_LINEAR)
        assert eval_kernel(spec, (2, 2), (5, 5)) == pytest.approx(1.5, abs=0)

    def test_ray_constant_is_scale_free_along_rays(self):
        spec = KernelSpec.ray_constant(Q_LINEAR)
        theta = np.array([0.3, 0.7])
        vals = {eval_kernel(spec, r * theta, s * theta) for r in (0.1, 1.0, 7.0) for s in (0.5, 3.0, 1e3)}
        assert vals == {1.3}

    def test_origin_is_rejected(self):
        with pytest.raises(DomainError):
            eval_kernel(KernelSpec.constant(), (0, 0), (1, 0))

    def test_power_law_pair_formula(self):
        spec = KernelSpec.power_law_pair(0.5, 0.25)
        x, y = np.array([4.0, 0.0]), np.array([0.0, 1.0])
        want = 4**0.75 * 1**-0.25 + 1**0.75 * 4**-0.25
        assert eval_kernel(spec, x, y) == pytest.approx(want, rel=1e-15)

    def test_homogeneous_table_interpolates_and_scales(self):
        spec = KernelSpec.homogeneous_table([0.1, 0.5, 0.9], [3.0, 1.0, 3.0], 0.5, 0.0, 0.5, 3.5)
        # s = 1/4 lies halfway between 0.1 and 0.5 in the min(s, 1-s) table
        val = eval_kernel(spec, (1, 0), (0, 3))
        t_interp = np.interp(0.25, [0.1, 0.5, 0.9], [3.0, 1.0, 3.0])
        assert val == pytest.approx(4**0.5 * t_interp, rel=1e-15)


class TestPhi:
    def test_p_zero_is_one(self):
        assert phi_p(0.0, 0.3) == 1.0

    def test_p_one_at_half(self):
        assert phi_p(1.0, 0.5) == 4.0

    def test_negative_p(self):
        # direct arithmetic: 0.25^0.5 * 0.75^0.5
        assert phi_p(-0.5, 0.25) == pytest.approx(0.4330127018922193, rel=1e-14)

    @pytest.mark.parametrize("s", [0.0, 1.0, -0.1, 1.5])
    def test_outside_open_interval(self, s):
        with pytest.raises(DomainError):
            phi_p(0.5, s)


class TestParams:
    def test_c1_must_not_exceed_c2(self):
        with pytest.raises(ConfigError):
            KernelParams(0.0, 0.0, 2.0, 1.0)

    def test_gamma_plus_two_p_nonnegative(self):
        with pytest.raises(ConfigError):
            KernelParams(0.2, -0.2, 1.0, 1.0)

    def test_no_gelation_gate_message(self):
        par = KernelParams(1.0, 0.0, 1.0, 1.0)
        assert not par.no_gelation
        with pytest.raises(ConfigError, match="gamma < 1"):
            par.require_no_gelation()

    def test_gamma_plus_p_gate(self):
        assert not KernelParams(0.6, 0.5, 1.0, 2.0).no_gelation
        assert KernelParams(0.5, 0.25, 1.0, 2.0).no_gelation


class TestChecks:
    def test_constant_bounds_are_tight(self):
        rep = check_bounds(KernelSpec.constant(1.0), lattice_pairs())
        assert rep.passed
        assert rep.worst_ratio_low == 1.0 and rep.worst_ratio_high == 1.0

    def test_additive_bounds(self):
        assert check_bounds(KernelSpec.additive(), lattice_pairs()).passed

    def test_mislabelled_product_fails(self):
        spec = KernelSpec(KernelParams(1.0, 0.0, 1.0, 1.0), KernelSpec.product().family)
        rep = check_bounds(spec, lattice_pairs(top=1024))
        assert not rep.passed
        assert rep.worst_ratio_high > 1
        assert rep.failing_sample is not None

    def test_homogeneity_constant(self):
        rep = check_homogeneity(KernelSpec.constant(), lattice_pairs(), scales=(7.0,))
        assert rep.passed and rep.max_rel_error == 0.0

    def test_homogeneity_additive_example(self):
        spec = KernelSpec.additive()
        assert eval_kernel(spec, (3, 3), (6, 0)) == 3 * eval_kernel(spec, (1, 1), (2, 0)) == 12

    def test_homogeneity_ray_constant_exact(self):
        rep = check_homogeneity(KernelSpec.ray_constant(Q_LINEAR), lattice_pairs(), scales=(10.0,))
        assert rep.passed and rep.max_rel_error == 0.0

    def test_wrong_degree_fails_homogeneity(self):
        spec = KernelSpec(KernelParams(0.5, 0.0, 1.0, 1.0), KernelSpec.additive().family)
        assert not check_homogeneity(spec, lattice_pairs()).passed

    def test_lower_product_bound_examples(self):
        assert check_lower_product_bound(KernelSpec.constant(), lattice_pairs()).passed
        assert eval_kernel(KernelSpec.additive(), (4, 0), (0, 1)) == 5 >= (4 * 1) ** 0.5
        assert check_lower_product_bound(KernelSpec.additive(), ([[4.0, 0.0]], [[0.0, 1.0]])).passed

    def test_lower_product_bound_power_law(self):
        spec = KernelSpec.power_law_pair(0.5, 0.25)
        ratios = np.logspace(-3, 3, 61)
        x = np.stack([ratios, np.zeros_like(ratios)], axis=1)
        y = np.stack([np.zeros_like(ratios), np.ones_like(ratios)], axis=1)
        assert check_lower_product_bound(spec, (x, y)).passed

    @pytest.mark.parametrize("spec", [
        KernelSpec.constant(2.5),
        KernelSpec.additive(),
        KernelSpec.product(),
        KernelSpec.power_law_pair(0.5, 0.25),
        KernelSpec.power_law_pair(-0.3, 0.4),
        KernelSpec.ray_constant(Q_LINEAR),
    ])
    def test_shipped_families_pass_suite(self, spec):
        reports = check_all(spec, 2)
        assert all(r.passed for r in reports), [r.to_dict() for r in reports if not r.passed]

    def test_q_dipping_to_zero_is_rejected(self):
        q = QForm(1.0, (-1.0, 0.0), ((0.0, 0.0), (0.0, 0.0)))
        with pytest.raises(ConfigError):
            KernelSpec.ray_constant(q)

    def test_q_outside_declared_bounds(self):
        spec = KernelSpec(KernelParams(0.0, 0.0, 1.2, 2.0), KernelSpec.ray_constant(Q_LINEAR).family, 2)
        with pytest.raises(ConfigError):
            spec.validate(2)
        assert not all(r.passed for r in check_all(spec, 2))


class TestSerialisation:
    def test_round_trip(self):
        for spec in (KernelSpec.constant(3.0), KernelSpec.power_law_pair(0.5, 0.25),
                     KernelSpec.ray_constant(Q_LINEAR)):
            again = KernelSpec.from_dict(spec.to_dict(), 2)
            assert again.to_dict() == spec.to_dict()
            assert again.content_hash() == spec.content_hash()

    def test_unknown_field_rejected(self):
        with pytest.raises(ConfigError, match="unknown"):
            KernelSpec.from_dict({"family": "constant", "value": 1.0, "valeu": 2.0})

    def test_unknown_family_rejected(self):
        with pytest.raises(ConfigError):
            KernelSpec.from_dict({"family": "brownian"})

    def test_asymmetric_table_rejected(self):
        with pytest.raises(ConfigError):
            KernelSpec.from_dict({"family": "homogeneous_table", "gamma": 0.0, "p": 0.0, "c1": 1.0,
                                  "c2": 3.0, "table": [[0.2, 1.0], [0.8, 3.0]]})

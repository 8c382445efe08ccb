import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvlov.errors import IntegrabilityError, ValidationError
from mvlov.kernels import (AdmissibilityReport, EnvelopeSpec, RadialQuadrature,
                           bounded_table, check_admissible, chi, chi_norm,
                           envelope_localized_norm, envelope_of, eval_kernel,
                           power_law, rotational, truncate, zero_kernel)

# ||chi||_p reference constants, frozen from an adaptive-quadrature oracle
# (scipy.integrate.quad of chi(s)^p * area(S^{d-1}) * s^{d-1} over [0, 2]).
CHI_NORM_QUAD = {
    (3.0, 2): 1.8661358990285104,
    (4.0, 1): 1.2898142923453753,
    (4.0, 2): 1.5716790294023382,
    (3.0, 1): 1.4186066244640390,
}


def rand_points(rng, n, d, scale=3.0):
    return scale * rng.standard_normal((n, d))


class TestEvalKernel:
    def test_radial_unit_distance(self):
        spec = power_law(1.0, 1.0)
        out = eval_kernel(spec, 0.0, np.array([1.0, 0.0]), np.array([0.0, 0.0]))
        assert np.array_equal(out, [1.0, 0.0])

    def test_diagonal_convention(self):
        x = np.array([0.3, -1.2])
        for spec in (power_law(1.0, 1.5, truncation_level=2.0), zero_kernel(),
                     bounded_table(lambda t, a, b: np.ones_like(a))):
            assert np.array_equal(eval_kernel(spec, 0.5, x, x), [0.0, 0.0])

    def test_power_law_formula_oracle(self):
        # independent scalar evaluation of kappa*(x-y)/|x-y|^alpha
        kappa, alpha = 2.0, 1.5
        x, y = np.array([0.25, 0.0]), np.array([0.0, 0.0])
        r = math.hypot(*(x - y))
        expected = kappa * (x - y) / r ** alpha
        assert np.allclose(expected, [4.0, 0.0], atol=1e-15)
        out = eval_kernel(power_law(kappa, alpha), 0.0, x, y)
        assert np.allclose(out, expected, rtol=1e-14)

    def test_rotational_orthogonality(self):
        rng = np.random.default_rng(0)
        spec = rotational(1.3, 1.2)
        x = rand_points(rng, 200, 2)
        y = rand_points(rng, 200, 2)
        out = eval_kernel(spec, 0.0, x, y)
        dots = np.abs(np.sum(out * (x - y), axis=1))
        scale = np.linalg.norm(out, axis=1) * np.linalg.norm(x - y, axis=1) + 1e-300
        assert np.all(dots / scale < 1e-12)

    def test_oddness_exact(self):
        rng = np.random.default_rng(1)
        for spec in (power_law(0.7, 1.5), rotational(1.1, 1.0)):
            x = rand_points(rng, 100, 2)
            y = rand_points(rng, 100, 2)
            fwd = eval_kernel(spec, 0.0, x, y)
            bwd = eval_kernel(spec, 0.0, y, x)
            assert np.array_equal(fwd, -bwd)

    def test_envelope_dominance_random_triples(self):
        rng = np.random.default_rng(2)
        n = 10_000
        spec = power_law(0.8, 1.4, truncation_level=3.0)
        x = rand_points(rng, n, 2)
        y = rand_points(rng, n, 2)
        out = eval_kernel(spec, 0.0, x, y)
        r = np.linalg.norm(x - y, axis=1)
        bound = np.minimum(spec.envelope(r), 3.0 * math.sqrt(2.0))
        assert np.all(np.linalg.norm(out, axis=1) <= bound * (1 + 1e-12))

    def test_time_scaling(self):
        spec = power_law(1.0, 1.0, time_scaling=lambda t: 2.0 * t)
        out = eval_kernel(spec, 0.5, np.array([1.0, 0.0]), np.array([0.0, 0.0]))
        assert np.allclose(out, [1.0, 0.0])

    def test_rejects_nonfinite(self):
        with pytest.raises(ValidationError):
            eval_kernel(zero_kernel(), 0.0, np.array([np.nan]), np.array([0.0]))


class TestTruncate:
    def test_clamp_above_below(self):
        spec = bounded_table(lambda t, a, b: np.full_like(a, 5.0))
        tr = truncate(spec, 3.0)
        out = eval_kernel(tr, 0.0, np.array([1.0]), np.array([0.0]))
        assert out[0] == 3.0
        spec_neg = bounded_table(lambda t, a, b: np.full_like(a, -7.0))
        out = eval_kernel(truncate(spec_neg, 3.0), 0.0, np.array([1.0]),
                          np.array([0.0]))
        assert out[0] == -3.0

    def test_composition_min_of_levels(self):
        rng = np.random.default_rng(3)
        spec = power_law(5.0, 1.8)
        ab = truncate(truncate(spec, 3.0), 5.0)
        ba = truncate(spec, 3.0)
        x = rand_points(rng, 10_000, 2, scale=0.5)
        y = rand_points(rng, 10_000, 2, scale=0.5)
        t = rng.uniform(0, 1)
        assert np.array_equal(eval_kernel(ab, t, x, y), eval_kernel(ba, t, x, y))

    def test_rejects_nonpositive(self):
        with pytest.raises(ValidationError):
            truncate(zero_kernel(), 0.0)

    @given(st.floats(0.1, 50), st.floats(0.1, 50))
    @settings(max_examples=25, deadline=None)
    def test_levels_compose_as_min(self, n1, n2):
        spec = truncate(truncate(power_law(1.0, 1.0), n1), n2)
        assert spec.truncation_level == pytest.approx(min(n1, n2))


class TestAdmissibility:
    def test_arithmetic_oracle(self):
        rep = check_admissible(EnvelopeSpec(lambda z: z, p=5.0, q=10.0), d=2)
        assert rep.admissible
        assert rep.slack == pytest.approx(1.0 - 2 / 5 - 2 / 10, abs=1e-15)

    def test_boundary_not_admissible(self):
        rep = check_admissible(EnvelopeSpec(lambda z: z, p=4.0, q=4.0), d=2)
        assert not rep.admissible
        assert rep.slack == pytest.approx(0.0, abs=1e-15)

    def test_power_law_window(self):
        # alpha = 1.5 in d=2: any p with d < p < d/(alpha-1) = 4 works at q ~ inf
        spec = power_law(1.0, 1.5)
        rep = check_admissible(envelope_of(spec, p=3.0, q=1e6), d=2)
        assert rep.admissible
        # and the norm must actually be finite there
        env = envelope_of(spec, p=3.0, q=1e6)
        val = envelope_localized_norm(env, 1.0, RadialQuadrature(), d=2)
        assert np.isfinite(val)

    def test_rejects_small_exponents(self):
        from types import SimpleNamespace
        with pytest.raises(ValidationError):
            EnvelopeSpec(lambda z: z, p=2.0, q=5.0)
        with pytest.raises(ValidationError):
            check_admissible(SimpleNamespace(p=2.0, q=8.0), d=2)
        with pytest.raises(ValidationError):
            check_admissible(SimpleNamespace(p=8.0, q=1.5), d=2)

    @given(st.floats(2.1, 40), st.floats(2.1, 40), st.floats(0.1, 20),
           st.floats(0.1, 20))
    @settings(max_examples=50, deadline=None)
    def test_monotone_in_exponents(self, p, q, dp, dq):
        base = check_admissible(EnvelopeSpec(lambda z: z, p=p, q=q), d=3)
        more = check_admissible(EnvelopeSpec(lambda z: z, p=p + dp, q=q + dq), d=3)
        if base.admissible:
            assert more.admissible
        assert more.slack >= base.slack - 1e-12


class TestChi:
    def test_plateau_and_support(self):
        assert chi(0.0) == 1.0
        assert chi(1.0) == 1.0
        assert chi(2.0) == 0.0
        assert chi(2.5) == 0.0

    def test_continuity_at_joints(self):
        assert chi(1.0 + 1e-8) == pytest.approx(1.0, abs=1e-7)
        assert chi(2.0 - 1e-4) < 1e-6

    def test_bit_stable_values(self):
        # the documented bump is the one fixed profile: freeze two samples
        assert chi(1.5) == pytest.approx(math.exp(1.0 - 1.0 / 0.75), abs=1e-15)
        assert chi(1.25) == pytest.approx(math.exp(1.0 - 16.0 / 15.0), abs=1e-15)


class TestEnvelopeNorm:
    def test_reference_constant_vs_quadrature_oracle(self):
        for (p, d), ref in CHI_NORM_QUAD.items():
            assert chi_norm(p, d) == pytest.approx(ref, rel=5e-7)

    def test_resolution_consistency_4x(self):
        env = EnvelopeSpec(profile=lambda z: np.ones_like(np.asarray(z, float)) * 0
                           + 1.0, p=3.0, q=10.0)
        base = envelope_localized_norm(env, 1.0, RadialQuadrature(n=512), d=2)
        fine = envelope_localized_norm(env, 1.0, RadialQuadrature(n=2048), d=2)
        assert base == pytest.approx(fine, rel=1e-4)
        assert base == pytest.approx(CHI_NORM_QUAD[(3.0, 2)], rel=1e-4)

    def test_integrable_singularity(self):
        # h(z) = z^-0.5 in d=2 at p=3: p*(alpha-1) = 1.5 < 2, finite
        env = EnvelopeSpec(profile=lambda z: np.asarray(z, float) ** -0.5,
                           p=3.0, q=10.0, alpha=1.5)
        base = envelope_localized_norm(env, 1.0, RadialQuadrature(n=512), d=2)
        fine = envelope_localized_norm(env, 1.0, RadialQuadrature(n=2048), d=2)
        assert np.isfinite(base)
        # frozen scipy.integrate.quad oracle of the same radial integral
        assert fine == pytest.approx(2.4653690132960557, rel=2e-3)

    def test_divergent_rejected(self):
        env = EnvelopeSpec(profile=lambda z: np.asarray(z, float) ** -1.0,
                           p=3.0, q=10.0, alpha=2.0 - 1e-9)
        with pytest.raises(IntegrabilityError):
            envelope_localized_norm(env, 1.0, RadialQuadrature(), d=2)


def test_admissibility_report_shape():
    rep = check_admissible(EnvelopeSpec(lambda z: z, p=5.0, q=10.0), d=2)
    assert isinstance(rep, AdmissibilityReport)

"""
Semigroup Tests

Inf-convolution, the Trotter product and evolved-potential gradients,
checked against Gaussian closed forms.
"""

import math

import numpy as np
import pytest

from errors import SemigroupError
from matrices import inner, norm2, sample_gue
from potential import QuadraticPotential, coupled_gaussian, coupled_gaussian_tracepoly, gue_potential, quartic_potential
from sampler import SamplerConfig
from semigroup import (EvolvedPotential, TrotterConfig, cross_term_coefficient, evolved_grad,
                       evolved_grad_halves, evolved_window, gradient_consistency, grid_times,
                       inf_convolve, secant_window_check, trotter_R, trotter_agreement,
                       two_term_check)


@pytest.fixture
def x():
    return sample_gue(np.random.default_rng(21), 1, 3)


def test_evolved_window():
    c, C = evolved_window(0.5, 2.0, 1.0)
    assert c == pytest.approx(1 / 3)
    assert C == pytest.approx(2 / 3)
    assert cross_term_coefficient(1.0, 1.0, 3.0) == 0.0


def test_grid_times():
    assert grid_times(1.0, 2) == [0.25, 0.5, 0.75, 1.0]


class TestInfConvolution:
    """Q_t of quadratics: Q_t(c‖x‖²/2) = c‖x‖²/(2(1 + ct))."""

    @pytest.mark.parametrize("c,t", [(1.0, 0.5), (2.0, 0.25), (2.0, 1.0), (2.0, 4.0)])
    def test_quadratic_closed_form(self, x, c, t):
        u = QuadraticPotential(precision=np.eye(1) * c)
        result = inf_convolve(u, t, x)
        factor = c / (1 + c * t)
        np.testing.assert_allclose(result.minimizer, x / (1 + c * t), atol=1e-9)
        np.testing.assert_allclose(result.grad, factor * x, atol=1e-9)
        assert result.value == pytest.approx(0.5 * factor * inner(x, x), abs=1e-9)
        assert result.residual < 1e-10

    def test_zero_time_is_identity(self, x):
        result = inf_convolve(gue_potential(1), 0.0, x)
        np.testing.assert_allclose(result.minimizer, x)
        assert result.iterations == 0

    def test_partial_in_x_only(self):
        rng = np.random.default_rng(3)
        V = coupled_gaussian(0.5, n=1)
        x, y = sample_gue(rng, 1, 3), sample_gue(rng, 1, 3)
        result = inf_convolve(V, 1.0, x, y)
        expected = (x + 0.5 * y) / 2.0
        np.testing.assert_allclose(result.grad[:1], expected, atol=1e-8)

    def test_negative_time(self, x):
        with pytest.raises(SemigroupError, match="Invalid time"):
            inf_convolve(gue_potential(1), -1.0, x)

    def test_non_convergence(self, x):
        with pytest.raises(SemigroupError, match="did not converge"):
            inf_convolve(quartic_potential(0.1), 1.0, 5 * x, max_iter=2)


class TestTrotter:
    """R_{t,ℓ} = (P_h Q_h)^{t/h}."""

    def test_gaussian_gradient(self, x):
        result = trotter_R(gue_potential(1), 0.5, 2, x)
        np.testing.assert_allclose(result.grad, x / 1.5, atol=1e-6)
        assert result.steps == 2
        assert result.evaluations > 0

    def test_time_must_be_on_grid(self, x):
        with pytest.raises(SemigroupError, match="Invalid Trotter time"):
            trotter_R(gue_potential(1), 0.3, 2, x)

    def test_refinement_level_bounded_by_curvature(self, x):
        with pytest.raises(SemigroupError, match="Invalid refinement level"):
            trotter_R(QuadraticPotential(precision=np.eye(1) * 10.0), 1.0, 0, x)

    def test_point_shape(self):
        with pytest.raises(SemigroupError, match="Invalid point shape"):
            trotter_R(gue_potential(1), 0.5, 1, np.zeros((2, 3, 3)))

    def test_bank_must_be_even(self):
        with pytest.raises(SemigroupError, match="Invalid bank size"):
            TrotterConfig(bank_size=3)
        with pytest.raises(SemigroupError, match="Invalid bank count"):
            TrotterConfig(banks=1)
        with pytest.raises(SemigroupError, match="Invalid SE budget"):
            TrotterConfig(se_budget=0.0)

    def test_antithetic_banks_are_exact_for_gaussians(self, x):
        result = trotter_R(gue_potential(1), 0.5, 2, x, cfg=TrotterConfig(banks=3))
        assert result.grad_se < 1e-6
        assert result.value_se is not None

    def test_standard_error_from_independent_banks(self, x):
        cfg = TrotterConfig(bank_size=2, se_budget=1.0, seed=5)
        result = trotter_R(quartic_potential(0.1), 0.25, 2, x, cfg=cfg)
        assert 0.0 < result.grad_se <= 1.0
        again = trotter_R(quartic_potential(0.1), 0.25, 2, x, cfg=cfg)
        np.testing.assert_array_equal(result.grad, again.grad)

    def test_tiny_bank_exceeds_budget(self, x):
        cfg = TrotterConfig(bank_size=2, se_budget=1e-8, seed=5)
        with pytest.raises(SemigroupError, match="Inner MC variance above budget"):
            trotter_R(quartic_potential(0.1), 0.25, 2, x, cfg=cfg)

    def test_agreement_with_closed_form(self, x):
        report = trotter_agreement(EvolvedPotential(gue_potential(1)), 0.5, 2, x)
        assert report['passed']
        assert report['distance'] < 1e-6
        assert report['trotter_se'] < 1e-6


class TestEvolvedPotential:
    """D_xV_t by closed form and by conditioned sampling."""

    def test_closed_form_coupled(self):
        rng = np.random.default_rng(4)
        V = coupled_gaussian(0.5, n=1)
        x, y = sample_gue(rng, 1, 3), sample_gue(rng, 1, 3)
        g, se = evolved_grad(EvolvedPotential(V), 1.0, x, y)
        assert se == 0.0
        np.testing.assert_allclose(g, (x + 0.5 * y) / 2.0, atol=1e-12)

    @pytest.mark.parametrize("s", [0.0, 0.5, 3.0, math.inf])
    def test_renormalized_gue_is_fixed(self, x, s):
        ep = EvolvedPotential(gue_potential(1), renormalized=True)
        g, _ = evolved_grad(ep, s, x)
        np.testing.assert_allclose(g, x, atol=1e-12)
        assert ep.window(s) == pytest.approx((1.0, 1.0))

    @pytest.mark.parametrize("t", [0.5, 4.0])
    def test_sampled_matches_closed_form(self, t):
        rng = np.random.default_rng(5)
        x, y = sample_gue(rng, 1, 3), sample_gue(rng, 1, 3)
        exact, _ = evolved_grad(EvolvedPotential(coupled_gaussian(0.5, n=1)), t, x, y)
        ep = EvolvedPotential(coupled_gaussian_tracepoly(0.5, n=1),
                              sampler_cfg=SamplerConfig.inner(n_samples=400))
        g, se = evolved_grad(ep, t, x, y, seed=1)
        assert se > 0
        assert float(norm2(g - exact)) <= 5 * se + 0.05

    def test_sampling_is_seeded(self, x):
        ep = EvolvedPotential(quartic_potential(0.1), sampler_cfg=SamplerConfig.inner(n_samples=50))
        a, _ = evolved_grad(ep, 0.5, x, seed=9)
        b, _ = evolved_grad(ep, 0.5, x, seed=9)
        np.testing.assert_array_equal(a, b)

    def test_halves_have_chain_axis(self, x):
        halves = evolved_grad_halves(EvolvedPotential(gue_potential(1)), 1.0, x)
        assert halves.shape == (2,) + x.shape

    def test_exact_requires_gaussian(self):
        with pytest.raises(SemigroupError, match="no closed-form"):
            EvolvedPotential(quartic_potential(0.1), exact=True)

    def test_invalid_inputs(self, x):
        ep = EvolvedPotential(gue_potential(1))
        with pytest.raises(SemigroupError, match="Invalid time"):
            evolved_grad(ep, -0.5, x)
        with pytest.raises(SemigroupError, match="Invalid x shape"):
            evolved_grad(ep, 0.5, np.zeros((2, 3, 3)))


class TestChecks:
    """Continuity, window and two-term estimates on Gaussian models."""

    def test_gradient_consistency(self, x):
        report = gradient_consistency(EvolvedPotential(gue_potential(1)), 0.5, x)
        assert report['passed']
        assert report['distance'] == pytest.approx(float(norm2(x)) / 3.0)

    def test_consistency_needs_short_time(self, x):
        with pytest.raises(SemigroupError, match="need C t <= 1"):
            gradient_consistency(EvolvedPotential(gue_potential(1)), 2.0, x)

    def test_secant_window(self):
        rng = np.random.default_rng(6)
        points = sample_gue(rng, 2, 3, size=(5,))
        partners = sample_gue(rng, 2, 3, size=(5,))
        report = secant_window_check(EvolvedPotential(coupled_gaussian(0.5, n=0)), 1.0, points, partners)
        assert report['passed']
        assert report['window'] == pytest.approx((0.5 / 1.5, 1.5 / 2.5))

    def test_two_term_estimate(self):
        rng = np.random.default_rng(7)
        x, y, xp, yp = (sample_gue(rng, 1, 3, size=(4,)) for _ in range(4))
        report = two_term_check(EvolvedPotential(coupled_gaussian(0.5, n=1)), 1.0, x, y, xp, yp)
        assert report['passed']

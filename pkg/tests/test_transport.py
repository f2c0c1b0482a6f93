"""
Transport Tests

Renormalized transport maps on Gaussian models, where F is affine:

    GUE                 F(x) = x
    shift α             F(x) = x − α
    coupled, given y    F(x, y) = x + λy
    coupled, triangular Φ(x) = (√(1 − λ²)x₁, x₂ + λx₁)
"""

import math

import numpy as np
import pytest

from errors import TransportError
from matrices import norm2, sample_gue, scalar_tuple
from potential import (QuadraticPotential, coupled_gaussian, gue_potential, quartic_potential,
                       shifted_gaussian)
from sampler import SamplerConfig, gue_moment_oracle, sample
from transport import (INF, ModelMoments, TransportConfig, TransportMap, condition_constant,
                       crn_bias_check, dy_decay_profile, group_law_check, integrate_map,
                       interpolated_states, inverse_map_check, lipschitz_audit, lipschitz_bounds,
                       pushforward_check, stage_potential, step_nodes, tail_from_infinity,
                       tail_to_infinity, talagrand_check, triangular_checks,
                       triangular_dependency_check, triangular_lipschitz_bound, triangular_transport)
from semigroup import EvolvedPotential
from verify import coupled_triangular_map


@pytest.fixture
def rng():
    return np.random.default_rng(41)


@pytest.fixture(scope="module")
def cfg():
    return TransportConfig.quick(seed=3, outer=SamplerConfig.quick(seed=3))


@pytest.fixture(scope="module")
def coupled():
    return coupled_gaussian(0.5, n=1)


class TestTransportConfig:
    """Validation and bounds."""

    @pytest.mark.parametrize("kwargs,message", [
        ({'step_scale': 0.5}, "Invalid step_scale"),
        ({'t_initial': 8.0, 't_cap': 4.0}, "Invalid truncation range"),
        ({'budget': 0.0}, "Invalid budget"),
        ({'tail_fraction': 1.0}, "Invalid tail_fraction"),
        ({'outer_samples': 2}, "Invalid outer_samples"),
        ({'threads': 0}, "Invalid threads"),
    ])
    def test_invalid(self, kwargs, message):
        with pytest.raises(TransportError, match=message):
            TransportConfig(**kwargs)

    def test_quick(self):
        cfg = TransportConfig.quick(budget=0.2)
        assert cfg.t_cap == 32.0
        assert cfg.budget == 0.2

    def test_condition_constant(self, coupled):
        assert condition_constant(gue_potential(1)) == 1.0
        assert condition_constant(coupled) == pytest.approx(2.0)

    def test_gue_bounds_are_trivial(self):
        bounds = lipschitz_bounds(gue_potential(1), INF, 0.0)
        assert bounds['dx'] == 1.0
        assert bounds['full'] == 1.0
        assert bounds['deviation'] == 0.0
        assert bounds['dy'] == 0.0

    def test_dy_bound_vanishes_on_equal_times(self, coupled):
        assert lipschitz_bounds(coupled, 2.0, 2.0)['dy'] == 0.0
        assert lipschitz_bounds(coupled, INF, 0.0)['dy'] > lipschitz_bounds(coupled, INF, 4.0)['dy']


class TestTails:
    """Truncation tails and moments."""

    def test_gaussian_moments(self):
        moments = ModelMoments.gaussian(shifted_gaussian(1.5), 3)
        assert float(norm2(moments.mean_x)) == pytest.approx(1.5)
        assert moments.var_x == pytest.approx(1.0)
        assert moments.var_y == 0.0

    def test_non_gaussian_moments_need_a_chain(self):
        with pytest.raises(TransportError, match="is not Gaussian"):
            ModelMoments.gaussian(quartic_potential(0.1), 3)

    def test_chain_moments(self):
        chain = sample(gue_potential(1), 3, SamplerConfig.quick(burn_in=100, n_samples=200, seed=2))
        moments = ModelMoments.from_chain(chain, 1)
        assert moments.var_x == pytest.approx(1.0, abs=0.3)
        assert set(moments.to_dict()) == {'mean_x_norm', 'var_x', 'var_y'}

    def test_tails_shrink_with_T(self, rng):
        V = shifted_gaussian(1.0)
        moments = ModelMoments.gaussian(V, 3)
        x = sample_gue(rng, 1, 3)
        assert tail_to_infinity(V, x, None, 16.0, moments) < tail_to_infinity(V, x, None, 4.0, moments)
        assert tail_from_infinity(V, x, None, 16.0, moments) < tail_from_infinity(V, x, None, 4.0, moments)

    def test_shift_tail_is_exact_remainder(self, rng):
        V = shifted_gaussian(2.0)
        moments = ModelMoments.gaussian(V, 3)
        tail = tail_to_infinity(V, sample_gue(rng, 1, 3), None, 8.0, moments)
        assert float(tail) == pytest.approx(2.0 * math.exp(-4.0))

    def test_step_nodes(self):
        nodes = step_nodes(EvolvedPotential(gue_potential(1), renormalized=True), 0.0, 2.0, 0.25)
        assert nodes[0] == 0.0 and nodes[-1] == 2.0
        assert (len(nodes) - 1) % 2 == 0
        assert np.all(np.diff(nodes) <= 0.25 + 1e-12)
        backwards = step_nodes(EvolvedPotential(gue_potential(1), renormalized=True), 2.0, 0.0, 0.25)
        assert np.all(np.diff(backwards) < 0)


class TestTransportMap:
    """F and G on closed-form models."""

    def test_gue_is_fixed(self, rng, cfg):
        x = sample_gue(rng, 1, 3, size=(4,))
        ev = TransportMap.forward(gue_potential(1), cfg).evaluate(x)
        np.testing.assert_allclose(ev.point, x, atol=1e-10)
        assert ev.max_budget < 1e-8

    def test_shift_is_translated(self, rng, cfg):
        V = shifted_gaussian(1.5)
        x = sample_gue(rng, 1, 3, size=(4,))
        ev = TransportMap.forward(V, cfg).evaluate(x)
        gap = norm2(ev.point - (x - scalar_tuple([1.5], 3)))
        assert np.all(gap <= ev.budget + 1e-6)
        assert ev.T is not None and ev.T <= cfg.t_cap

    def test_backward_shift(self, rng, cfg):
        V = shifted_gaussian(1.5)
        u = sample_gue(rng, 1, 3, size=(3,))
        ev = TransportMap.backward(V, cfg).evaluate(u)
        gap = norm2(ev.point - (u + scalar_tuple([1.5], 3)))
        assert np.all(gap <= ev.budget + 1e-6)

    def test_stiff_gaussian_is_rescaled(self, rng, cfg):
        V = QuadraticPotential(precision=2.0 * np.eye(1), label="precision-2")
        x = sample_gue(rng, 1, 3, size=(2,))
        ev = TransportMap.forward(V, cfg).evaluate(x)
        gap = norm2(ev.point - math.sqrt(2.0) * x)
        assert np.all(gap <= ev.budget + 1e-6)

    def test_coupled_conditional_map(self, rng, cfg, coupled):
        x, y = sample_gue(rng, 1, 3, size=(3,)), sample_gue(rng, 1, 3, size=(3,))
        ev = TransportMap.forward(coupled, cfg).evaluate(x, y)
        gap = norm2(ev.point - (x + 0.5 * y))
        assert np.all(gap <= ev.budget + 1e-6)

    def test_finite_times(self, rng, cfg):
        V = shifted_gaussian(1.0)
        x = sample_gue(rng, 1, 3)
        point = TransportMap(V, 2.0, 0.0, cfg)(x)
        expected = x + scalar_tuple([math.exp(-1.0) - 1.0], 3)
        np.testing.assert_allclose(point, expected, atol=1e-6)

    def test_equal_times_is_identity(self, rng, cfg):
        x = sample_gue(rng, 1, 3)
        ev = integrate_map(EvolvedPotential(quartic_potential(0.1), renormalized=True), 1.0, 1.0, x, cfg=cfg)
        np.testing.assert_array_equal(ev.point, x)
        assert ev.steps == 0

    def test_transcripts_and_info(self, rng, cfg):
        tmap = TransportMap.forward(gue_potential(1), cfg)
        tmap(sample_gue(rng, 1, 2))
        info = tmap.get_info()
        assert info['closed_form'] is True
        assert info['evaluations'] == 1
        assert set(tmap.transcripts[0].to_dict(include_points=False)) == {
            's', 't', 'T', 'steps', 'budget', 'ode_error', 'mc_error', 'tail'}

    def test_sampled_map_is_seeded(self, rng):
        cfg = TransportConfig.quick(seed=5, sampler=SamplerConfig.inner(n_samples=40, burn_in=40),
                                    error_estimate=False)
        V = quartic_potential(0.1)
        x = sample_gue(rng, 1, 2, size=(2,))
        a = integrate_map(EvolvedPotential(V, renormalized=True, sampler_cfg=cfg.sampler), 1.0, 0.0, x, cfg=cfg)
        b = integrate_map(EvolvedPotential(V, renormalized=True, sampler_cfg=cfg.sampler), 1.0, 0.0, x, cfg=cfg)
        np.testing.assert_array_equal(a.point, b.point)
        assert np.all(a.mc_error > 0)

    def test_invalid_inputs(self, rng, cfg, coupled):
        with pytest.raises(TransportError, match="Invalid endpoint s"):
            TransportMap(gue_potential(1), -1.0, 0.0, cfg)
        with pytest.raises(TransportError, match="Invalid x shape"):
            TransportMap.forward(gue_potential(1), cfg)(np.zeros((2, 3, 3)))
        with pytest.raises(TransportError, match="Missing y"):
            TransportMap.forward(coupled, cfg)(sample_gue(rng, 1, 3))
        with pytest.raises(TransportError, match="renormalized"):
            integrate_map(EvolvedPotential(gue_potential(1)), INF, 0.0, sample_gue(rng, 1, 3), cfg=cfg)

    def test_budget_enforcement(self, rng):
        cfg = TransportConfig.quick(budget=1e-12, enforce_budget=True, t_cap=4.0)
        with pytest.raises(TransportError, match="Budget exceeded"):
            TransportMap.forward(shifted_gaussian(1.0), cfg)(sample_gue(rng, 1, 3))

    def test_interpolated_states(self, rng):
        states = sample_gue(rng, 2, 3, size=(5,))
        out = interpolated_states(states, 1, 0.0, rng)
        np.testing.assert_array_equal(out, states)
        moved = interpolated_states(states, 1, 1.0, rng)
        np.testing.assert_array_equal(moved[:, 1], states[:, 1])
        assert not np.allclose(moved[:, 0], states[:, 0])


class TestChecks:
    """Pushforward, Talagrand, Lipschitz audits and the group law."""

    def test_pushforward_of_shift(self, cfg):
        V = shifted_gaussian(1.0)
        oracle = gue_moment_oracle(3, 4)
        report = pushforward_check(TransportMap.forward(V, cfg), list(oracle), cfg, N=3, oracle=oracle)
        assert report.passed
        assert report.details['words']

    def test_pushforward_against_interpolated_law(self, cfg):
        tmap = TransportMap(shifted_gaussian(1.0), 2.0, 0.5, cfg)
        assert pushforward_check(tmap, [(0,), (0, 0)], cfg, N=3).passed

    def test_pushforward_needs_states(self, cfg):
        with pytest.raises(TransportError, match="Either a chain"):
            pushforward_check(TransportMap.forward(gue_potential(1), cfg), [(0,)], cfg)

    @pytest.mark.parametrize("alpha", [0.0, 1.0])
    def test_talagrand_on_translations(self, cfg, alpha):
        report = talagrand_check(shifted_gaussian(alpha), cfg, N=3)
        assert report.passed
        assert report.details['lhs'] == pytest.approx(alpha ** 2, abs=1e-3)

    def test_lipschitz_translation_deviation_is_zero(self, cfg):
        report = lipschitz_audit(TransportMap.forward(shifted_gaussian(1.0), cfg), 3, pairs=3, cfg=cfg)
        assert report.passed
        assert report.details['observed']['deviation'] <= 1e-12

    def test_lipschitz_coupled(self, cfg, coupled):
        report = lipschitz_audit(TransportMap.forward(coupled, cfg), 3, pairs=3, cfg=cfg)
        assert report.passed
        assert report.details['observed']['dy'] == pytest.approx(0.5, abs=1e-6)

    def test_inverse(self, rng, cfg, coupled):
        x, y = sample_gue(rng, 1, 3, size=(3,)), sample_gue(rng, 1, 3, size=(3,))
        report = inverse_map_check(TransportMap.forward(coupled, cfg), TransportMap.backward(coupled, cfg), x, y)
        assert report.passed

    def test_group_law(self, rng, cfg):
        x = sample_gue(rng, 1, 3, size=(2,))
        report = group_law_check(shifted_gaussian(1.0), 4.0, 1.0, 0.0, x, cfg=cfg)
        assert report.passed
        assert report.details['times'] == (4.0, 1.0, 0.0)

    def test_crn_bias(self, rng):
        cfg = TransportConfig.quick(seed=6, sampler=SamplerConfig.inner(n_samples=60, burn_in=60),
                                    error_estimate=False)
        tmap = TransportMap(quartic_potential(0.1), 1.0, 0.0, cfg, exact=False)
        assert crn_bias_check(tmap, sample_gue(rng, 1, 2)).passed

    def test_dy_decay(self, cfg, coupled):
        report = dy_decay_profile(coupled, [0.0, 1.0, 4.0], 3, pairs=2, cfg=cfg)
        assert report.passed
        assert report.details['bounds'][0] >= report.details['bounds'][-1]

    def test_dy_decay_needs_y_block(self, cfg):
        with pytest.raises(TransportError, match="has no y-block"):
            dy_decay_profile(gue_potential(1), [0.0], 3, cfg=cfg)


class TestTriangular:
    """Staged transport of the coupled Gaussian pair."""

    @pytest.fixture(scope="class")
    def pair(self):
        return coupled_gaussian(0.5, n=0)

    @pytest.fixture(scope="class")
    def pair_chain(self, pair, cfg):
        return sample(pair, 3, cfg.outer)

    @pytest.fixture(scope="class")
    def tri(self, pair, pair_chain, cfg):
        return triangular_transport(pair, cfg, pair_chain)

    def test_stage_potentials(self, pair):
        first = stage_potential(pair, 0)
        second = stage_potential(pair, 1)
        assert (first.m, first.n) == (1, 0)
        assert (second.m, second.n) == (1, 1)
        assert first.as_quadratic().precision[0, 0] == pytest.approx(0.75)

    def test_matches_closed_form(self, tri, rng):
        x = sample_gue(rng, 2, 3, size=(3,))
        phi, budgets = tri.evaluate(x)
        expected = coupled_triangular_map(0.5)(x)
        assert np.all(norm2(phi - expected) <= np.sum(budgets, axis=-1) + 1e-6)

    def test_inverse_round_trip(self, tri, rng):
        x = sample_gue(rng, 2, 3, size=(2,))
        phi, budgets = tri.evaluate(x)
        back, back_budgets = tri.inverse(phi)
        allowance = np.sum(back_budgets, axis=-1) + math.sqrt(2.0) * np.sum(budgets, axis=-1) + 1e-8
        assert np.all(norm2(back - x) <= allowance)

    def test_dependency_structure(self, tri, rng):
        report = triangular_dependency_check(tri, sample_gue(rng, 2, 3, size=(2,)), rng)
        assert report.passed
        assert report.details['violations'] == []

    def test_checks_pass(self, tri, pair_chain, cfg):
        reports = triangular_checks(tri, pair_chain, cfg, coupled_triangular_map(0.5))
        assert [r.name for r in reports] == ['triangular_pushforward', 'triangular_opnorm',
                                             'triangular_inverse', 'triangular_closed_form']
        assert all(r.passed for r in reports)

    def test_lipschitz_bound(self, pair):
        assert triangular_lipschitz_bound(pair) == pytest.approx(math.sqrt(2) * 7 * math.sqrt(2))

    def test_tuple_length(self, tri):
        with pytest.raises(TransportError, match="Invalid tuple length"):
            tri.evaluate(np.zeros((3, 3, 3)))
        assert tri.get_info()["stages"] == [stage.label for stage in tri.stages]

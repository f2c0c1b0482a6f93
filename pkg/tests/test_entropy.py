"""
Entropy Tests

Fisher information estimates, the log-time quadratures and the entropy
identities on Gaussian models with closed forms:

    GUE                 h = ½ log 2πe,              h_g = 0
    precision 2         h = ½ log 2πe − ½ log 2,    h_g = ¼ − ½ log 2
    shift α             h_g = −α²/2
"""

import math
from dataclasses import replace

import numpy as np
import pytest

from entropy import (FisherMode, QuadratureConfig, control_variate_mean, entropy,
                     entropy_additivity_check, entropy_g, entropy_sweep, fisher,
                     fisher_sandwich_check, fisher_scaling_check, gaussian_entropy, gaussian_h_g,
                     log_simpson, lsi_check, stein_controls, two_route_check)
from errors import EntropyError
from matrices import sample_gue
from potential import QuadraticPotential, coupled_gaussian, gue_potential, shifted_gaussian
from sampler import SamplerConfig, sample

HALF_LOG_2PIE = 0.5 * math.log(2 * math.pi * math.e)


@pytest.fixture(scope="module")
def cfg():
    return QuadratureConfig.quick(sampler=SamplerConfig.quick(seed=7))


@pytest.fixture(scope="module")
def fine_cfg():
    return QuadratureConfig(outer_samples=60, sampler=SamplerConfig.quick(seed=7))


@pytest.fixture(scope="module")
def gue_chain(cfg):
    return sample(gue_potential(1), 3, cfg.sampler)


@pytest.fixture(scope="module")
def stiff():
    return QuadraticPotential(precision=2.0 * np.eye(1), label="precision-2")


@pytest.fixture(scope="module")
def stiff_chain(stiff, cfg):
    return sample(stiff, 3, cfg.sampler)


@pytest.fixture(scope="module")
def coupled():
    return coupled_gaussian(0.5, n=1)


@pytest.fixture(scope="module")
def coupled_chain(coupled, cfg):
    return sample(coupled, 3, cfg.sampler)


class TestClosedForms:
    """Gaussian entropies."""

    def test_gue(self):
        assert gaussian_entropy(gue_potential(1)) == pytest.approx(HALF_LOG_2PIE)
        assert gaussian_h_g(gue_potential(1)) == pytest.approx(0.0, abs=1e-12)

    def test_stiff(self, stiff):
        assert gaussian_entropy(stiff) == pytest.approx(HALF_LOG_2PIE - 0.5 * math.log(2))
        assert gaussian_h_g(stiff) == pytest.approx(0.25 - 0.5 * math.log(2))

    def test_shift(self):
        assert gaussian_h_g(shifted_gaussian(1.5)) == pytest.approx(-1.125)

    def test_conditional_entropy_uses_conditional_precision(self, coupled):
        assert gaussian_entropy(coupled) == pytest.approx(HALF_LOG_2PIE)


class TestQuadratureConfig:
    """Grid validation."""

    @pytest.mark.parametrize("kwargs,message", [
        ({'t_min': 0.0}, "Invalid time grid"),
        ({'s_min': 20.0}, "Invalid time grid"),
        ({'points': 12}, "Invalid points"),
        ({'s_points': 3}, "Invalid s_points"),
        ({'outer_samples': 2}, "Invalid outer_samples"),
    ])
    def test_invalid(self, kwargs, message):
        with pytest.raises(EntropyError, match=message):
            QuadratureConfig(**kwargs)

    def test_quick_grid(self):
        cfg = QuadratureConfig.quick()
        assert (cfg.points, cfg.s_points) == (13, 13)


class TestFisher:
    """Score estimates with integration-by-parts control variates."""

    def test_gue_at_zero_time(self, gue_chain, cfg):
        est = fisher(gue_potential(1), gue_chain, 0.0, cfg=cfg)
        assert est.estimate == pytest.approx(1.0, abs=1e-8)

    @pytest.mark.parametrize("t", [0.1, 1.0, 10.0])
    def test_gue_along_heat_flow(self, gue_chain, cfg, t):
        est = fisher(gue_potential(1), gue_chain, t, cfg=cfg)
        assert est.estimate == pytest.approx(1.0 / (1.0 + t), abs=1e-8)

    def test_gaussian_mode_vanishes_for_gue(self, gue_chain, cfg):
        est = fisher(gue_potential(1), gue_chain, 0.7, FisherMode.GAUSSIAN, cfg, renormalized=True)
        assert est.estimate == pytest.approx(0.0, abs=1e-10)

    def test_without_controls_is_close(self, gue_chain, cfg):
        est = fisher(gue_potential(1), gue_chain, 0.0, cfg=replace(cfg, control_variates=False))
        assert abs(est.estimate - 1.0) <= 5 * est.se + 0.02

    def test_stein_controls_shape(self):
        rng = np.random.default_rng(0)
        g, x = sample_gue(rng, 2, 3, size=(2, 10))
        y = sample_gue(rng, 1, 3, size=(10,))
        assert stein_controls(g, x, y).shape == (10, 1 + 2 + 2)
        assert stein_controls(g, x, None).shape == (10, 3)

    def test_control_variate_removes_correlated_noise(self):
        rng = np.random.default_rng(1)
        control = rng.standard_normal(400)
        values = 3.0 + 2.0 * control + 1e-3 * rng.standard_normal(400)
        mean, se = control_variate_mean(values, control[:, None])
        assert mean == pytest.approx(3.0, abs=1e-3)
        assert se < 1e-3

    def test_invalid_inputs(self, gue_chain, cfg):
        with pytest.raises(EntropyError, match="Invalid time"):
            fisher(gue_potential(1), gue_chain, -1.0, cfg=cfg)
        with pytest.raises(EntropyError, match="Chain has 1 variables"):
            fisher(gue_potential(2), gue_chain, 0.0, cfg=cfg)

    def test_sandwich(self, coupled, coupled_chain, cfg):
        report = fisher_sandwich_check(coupled, coupled_chain, [0.5, 1.0, 4.0], cfg)
        assert report.passed
        assert report.details['a'] > 1.0

    def test_scaling(self, gue_chain, cfg):
        assert fisher_scaling_check(gue_potential(1), gue_chain, 2.0, cfg).passed
        with pytest.raises(EntropyError, match="Invalid scale factor"):
            fisher_scaling_check(gue_potential(1), gue_chain, 0.0, cfg)


class TestQuadrature:
    """Log-time Simpson rule and the two entropy integrals."""

    def test_log_simpson(self):
        grid = np.geomspace(1e-3, 1e3, 25)
        value, err, mc = log_simpson(grid, 1.0 / (1.0 + grid) ** 2, np.zeros(25))
        exact = 1.0 / (1.0 + 1e-3) - 1.0 / (1.0 + 1e3)
        assert value == pytest.approx(exact, abs=1e-2)
        assert err >= 0.0
        assert mc == 0.0

    def test_gue_entropy(self, gue_chain, cfg):
        result = entropy(gue_potential(1), cfg, gue_chain)
        assert result.closed_form == pytest.approx(HALF_LOG_2PIE)
        assert abs(result.value - HALF_LOG_2PIE) <= result.budget + 1e-3
        np.testing.assert_allclose(result.integrand, 0.0, atol=1e-8)

    def test_stiff_entropy(self, stiff, stiff_chain, cfg):
        result = entropy(stiff, cfg, stiff_chain)
        assert abs(result.value - gaussian_entropy(stiff)) <= result.budget + 1e-2

    def test_shifted_relative_entropy(self, cfg):
        V = shifted_gaussian(1.0)
        result = entropy_g(V, cfg, N=3)
        assert result.closed_form == pytest.approx(-0.5)
        assert abs(result.value + 0.5) <= result.budget + 1e-2

    def test_gue_relative_entropy_vanishes(self, gue_chain, cfg):
        assert entropy_g(gue_potential(1), cfg, gue_chain).value == pytest.approx(0.0, abs=1e-8)

    def test_csv_layout(self, tmp_path, gue_chain, cfg):
        path = tmp_path / "h.csv"
        entropy(gue_potential(1), cfg, gue_chain).to_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "t,integrand,se"
        assert len(lines) == 1 + cfg.points

    def test_budget_limit(self, gue_chain):
        tight = QuadratureConfig.quick(budget=1e-12)
        with pytest.raises(EntropyError, match="Budget exceeded"):
            entropy(gue_potential(1), tight, gue_chain)

    def test_needs_chain_or_size(self, cfg):
        with pytest.raises(EntropyError, match="Either a chain"):
            entropy(gue_potential(1), cfg)


class TestIdentities:
    """LSI, the two h_g routes, additivity and the N sweep."""

    def test_lsi(self, stiff, stiff_chain, cfg):
        report = lsi_check(stiff, cfg, stiff_chain)
        assert report.passed
        assert report.details['margin'] > 0

    def test_two_routes(self, stiff, stiff_chain, fine_cfg):
        assert two_route_check(stiff, fine_cfg, stiff_chain).passed

    def test_additivity(self, coupled, coupled_chain, fine_cfg):
        report = entropy_additivity_check(coupled, fine_cfg, coupled_chain)
        assert report.passed
        closed = report.details['closed_form']
        assert closed['h_joint'] == pytest.approx(closed['h_conditional'] + closed['h_marginal'])

    def test_additivity_needs_y_block(self, cfg):
        with pytest.raises(EntropyError, match="needs a y-block"):
            entropy_additivity_check(gue_potential(1), cfg, N=3)

    def test_sweep_grid_validation(self, cfg):
        with pytest.raises(EntropyError, match="Invalid N grid"):
            entropy_sweep(lambda N: gue_potential(1), [8, 4, 16], cfg)
        with pytest.raises(EntropyError, match="Invalid N grid"):
            entropy_sweep(lambda N: gue_potential(1), [4, 8], cfg)

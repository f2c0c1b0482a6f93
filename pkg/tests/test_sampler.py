"""
Sampler Tests

MALA chains, batch means, moment oracles, diagnostics and checkpoints.
"""

import math

import numpy as np
import pytest

from errors import SamplerError
from matrices import sample_gue, tau
from potential import gue_potential, quartic_potential
from sampler import (THETA, BatchMeans, MomentTable, SampleChain, SamplerConfig, batch_means, herbst_check,
                     conjugate_bound_check, estimate_moments, gue_moment_oracle, load_chain,
                     mean_scalar_deviation, opnorm_concentration_check, quartic_moment_oracle, sample, sample_target,
                     save_chain, schwinger_dyson_residual, score_mean_check, seed_sequence,
                     theta_n, variance_sandwich_check, word_values)


@pytest.fixture(scope="module")
def gue_chain():
    return sample(gue_potential(1), 4, SamplerConfig.quick(seed=5))


def constant_chain(value: np.ndarray, chains: int = 2, n: int = 10) -> SampleChain:
    states = np.broadcast_to(value, (chains, n) + value.shape).copy()
    return SampleChain(states=states, acceptance=np.full(chains, 0.6), steps=np.full(chains, 0.1),
                       N=value.shape[-1])


class TestConstants:
    """Universal constants and moment oracles."""

    def test_theta_closed_form(self):
        assert THETA == pytest.approx(9.445053, abs=1e-5)

    def test_theta_n_decreases_to_theta(self):
        assert theta_n(4) > theta_n(16) > THETA
        assert theta_n(10 ** 8) == pytest.approx(THETA, abs=1e-7)

    @pytest.mark.parametrize("N", [1, 4, 16])
    def test_harer_zagier_values(self, N):
        oracle = gue_moment_oracle(N, 6)
        assert oracle[(0, 0)] == pytest.approx(1.0)
        assert oracle[(0,) * 4] == pytest.approx(2.0 + 1.0 / N ** 2)
        assert oracle[(0,) * 6] == pytest.approx(5.0 + 10.0 / N ** 2)
        assert oracle[(0,) * 3] == 0.0

    def test_gue_oracle_variance_scaling(self):
        assert gue_moment_oracle(8, 4, variance=2.0)[(0,) * 4] == pytest.approx(4.0 * (2 + 1 / 64))

    def test_quartic_oracle_at_zero_coupling_is_catalan(self):
        oracle = quartic_moment_oracle(0.0, 8)
        assert [oracle[(0,) * p] for p in (2, 4, 6, 8)] == [1.0, 2.0, 5.0, 14.0]

    def test_quartic_oracle_satisfies_loop_equation(self):
        g = 0.1
        oracle = quartic_moment_oracle(g, 8)
        m = [oracle.get((0,) * p, 1.0) for p in range(9)]
        assert m[2] < 1.0
        assert m[2] + 4 * g * m[4] == pytest.approx(1.0)
        assert m[4] + 4 * g * m[6] == pytest.approx(2 * m[2])

    def test_invalid_oracle_arguments(self):
        with pytest.raises(SamplerError, match="Invalid oracle arguments"):
            gue_moment_oracle(0, 4)
        with pytest.raises(SamplerError, match="Invalid quartic coupling"):
            quartic_moment_oracle(-1.0, 4)


class TestSamplerConfig:
    """Configuration validation."""

    def test_defaults_are_valid(self):
        cfg = SamplerConfig()
        assert cfg.accept_band == (0.5, 0.7)
        assert SamplerConfig.inner().threads == 1

    @pytest.mark.parametrize("kwargs,message", [
        ({'step': 0.0}, "Invalid step size"),
        ({'n_samples': 0}, "Invalid n_samples"),
        ({'burn_in': -1}, "Invalid burn_in"),
        ({'accept_band': (0.7, 0.5)}, "Invalid acceptance band"),
        ({'lobatto_nodes': 1}, "Invalid lobatto_nodes"),
        ({'max_iterations': 100}, "exceeds max_iterations"),
    ])
    def test_invalid_settings(self, kwargs, message):
        with pytest.raises(SamplerError, match=message):
            SamplerConfig(**kwargs)

    def test_seed_sequence_normalization(self):
        a = seed_sequence(7).generate_state(4)
        b = seed_sequence(seed_sequence(7)).generate_state(4)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(seed_sequence((7, 1)).generate_state(4), a)


class TestBatchMeans:
    """Batch-means standard errors and effective sample sizes."""

    def test_iid_standard_error(self):
        values = np.random.default_rng(0).standard_normal((4, 2500))
        bm = batch_means(values)
        assert isinstance(bm, BatchMeans)
        assert bm.se == pytest.approx(1.0 / math.sqrt(10000), rel=0.3)
        assert abs(bm.mean) < 5 * bm.se

    def test_constant_values(self):
        bm = batch_means(np.ones((2, 100)))
        assert bm.se == 0.0
        assert bm.ess == 200

    def test_complex_values_combine_parts(self):
        rng = np.random.default_rng(1)
        values = rng.standard_normal((2, 400)) + 1j * rng.standard_normal((2, 400))
        bm = batch_means(values)
        re, im = batch_means(values.real), batch_means(values.imag)
        assert bm.se == pytest.approx(math.hypot(re.se, im.se))


class TestChains:
    """MALA sampling of convex models."""

    def test_gue_second_moment(self, gue_chain):
        table = estimate_moments(gue_chain, [(0, 0)])
        assert abs(table.estimate((0, 0)).real - 1.0) <= 5 * table.se((0, 0)) + 0.02

    def test_acceptance_in_band(self, gue_chain):
        assert np.all(gue_chain.acceptance > 0.5 - 0.25)
        assert gue_chain.states.shape == (2, 400, 1, 4, 4)

    def test_chains_are_reproducible(self):
        cfg = SamplerConfig.quick(burn_in=50, n_samples=20, seed=3)
        a = sample(gue_potential(1), 3, cfg)
        b = sample(gue_potential(1), 3, cfg)
        np.testing.assert_array_equal(a.states, b.states)

    def test_threaded_and_serial_agree(self):
        cfg = SamplerConfig.quick(burn_in=50, n_samples=20, seed=4)
        threaded = sample_target(gue_potential(1).full_grad, np.zeros((1, 3, 3)), 3, cfg)
        serial = sample_target(gue_potential(1).full_grad, np.zeros((1, 3, 3)), 3,
                               SamplerConfig.quick(burn_in=50, n_samples=20, seed=4, threads=1))
        np.testing.assert_array_equal(threaded.states, serial.states)

    def test_acceptance_outside_band_raises(self):
        cfg = SamplerConfig(step=1e-4, burn_in=0, n_samples=50, accept_tolerance=0.0)
        with pytest.raises(SamplerError, match="Acceptance rate"):
            sample(gue_potential(1), 3, cfg)

    def test_invalid_matrix_size(self):
        with pytest.raises(SamplerError, match="Invalid matrix size"):
            sample(gue_potential(1), 0, SamplerConfig.quick())

    def test_select_and_info(self, gue_chain):
        info = gue_chain.get_info()
        assert info['N'] == 4 and info['chains'] == 2
        assert gue_chain.select([0]).k == 1


class TestMoments:
    """Moment tables and identities."""

    def test_word_values_match_trace(self):
        x = sample_gue(np.random.default_rng(2), 2, 3)
        expected = tau(x[0] @ x[1] @ x[0])
        assert word_values(x, (0, 1, 0)) == pytest.approx(expected)
        assert word_values(x, ()) == 1.0

    def test_constant_chain_moments(self):
        value = np.diag([1.0, -1.0, 2.0]).astype(complex)[None]
        table = estimate_moments(constant_chain(value), [(), (0,), (0, 0)])
        assert table.estimate(()) == 1.0
        assert table.estimate((0,)) == pytest.approx(2.0 / 3.0)
        assert table.estimate((0, 0)) == pytest.approx(2.0)
        assert table.se((0, 0)) == 0.0

    def test_word_validation(self):
        chain = constant_chain(np.eye(2, dtype=complex)[None])
        with pytest.raises(SamplerError, match="Invalid word length"):
            estimate_moments(chain, [(0,) * 13])
        with pytest.raises(SamplerError, match="outside"):
            estimate_moments(chain, [(1,)])

    def test_conjugate_symmetry(self, gue_chain):
        table = estimate_moments(gue_chain, [(0, 0, 0), (0,)])
        assert table.conjugate_symmetry_violations() == []

    def test_csv_columns(self, tmp_path, gue_chain):
        table = estimate_moments(gue_chain, [(0, 0), (0, 0, 0, 0)])
        path = tmp_path / "moments.csv"
        table.to_csv(path, gue_moment_oracle(4, 4))
        lines = path.read_text().splitlines()
        assert lines[0] == "word,re,im,se,oracle"
        assert lines[1].startswith("x1 x1,")
        assert isinstance(table, MomentTable)

    def test_schwinger_dyson_residual_small(self, gue_chain):
        res = schwinger_dyson_residual(gue_chain, gue_potential(1), (0,), 0)
        assert abs(res.residual) <= 5 * res.se + 0.02

    def test_quartic_loop_equation(self):
        V = quartic_potential(0.1)
        chain = sample(V, 4, SamplerConfig.quick(seed=8))
        res = schwinger_dyson_residual(chain, V, (0, 0, 0), 0)
        assert abs(res.residual) <= 5 * res.se + 0.05


class TestDiagnostics:
    """Concentration and conjugate-variable checks on a GUE chain."""

    def test_score_mean_and_variance(self, gue_chain):
        V = gue_potential(1)
        assert score_mean_check(gue_chain, V).passed
        assert variance_sandwich_check(gue_chain, V).passed

    def test_conjugate_bound(self, gue_chain):
        report = conjugate_bound_check(gue_chain, gue_potential(1))
        assert report.passed
        assert report.details['max_ratio'] <= 1.0

    def test_herbst_for_normalized_trace(self, gue_chain):
        report = herbst_check(gue_chain, lambda x: tau(x[..., 0, :, :]), K=1.0, c=1.0)
        assert report.passed
        assert all(0.0 <= row['frequency'] <= 1.0 for row in report.details['rows'])

    def test_herbst_detects_understated_constant(self, gue_chain):
        report = herbst_check(gue_chain, lambda x: tau(x[..., 0, :, :]), K=0.05, c=1.0, deltas=[0.1])
        assert not report.passed

    def test_operator_norm_concentration(self, gue_chain):
        report = opnorm_concentration_check(gue_chain, c=1.0)
        assert report.passed
        assert report.details['max_opnorm'] < THETA
        finite = opnorm_concentration_check(gue_chain, c=1.0, finite_n=True)
        assert finite.details['theta'] == pytest.approx(theta_n(4))

    def test_mean_is_nearly_scalar(self, gue_chain):
        assert mean_scalar_deviation(gue_chain)[0] < 0.2


class TestCheckpoints:
    """Binary chain checkpoints."""

    def test_round_trip(self, tmp_path, gue_chain):
        path = tmp_path / "chain.fgch"
        save_chain(path, gue_chain)
        loaded = load_chain(path)
        np.testing.assert_array_equal(loaded.states, gue_chain.states)
        np.testing.assert_array_equal(loaded.acceptance, gue_chain.acceptance)
        assert loaded.N == 4

    def test_bad_magic(self, tmp_path, gue_chain):
        path = tmp_path / "chain.fgch"
        save_chain(path, gue_chain)
        data = bytearray(path.read_bytes())
        data[:4] = b'XXXX'
        path.write_bytes(bytes(data))
        with pytest.raises(SamplerError, match="Invalid checkpoint magic"):
            load_chain(path)

    def test_truncated(self, tmp_path, gue_chain):
        path = tmp_path / "chain.fgch"
        save_chain(path, gue_chain)
        path.write_bytes(path.read_bytes()[:-16])
        with pytest.raises(SamplerError, match="expected"):
            load_chain(path)

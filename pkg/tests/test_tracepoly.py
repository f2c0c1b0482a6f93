"""
Trace Polynomial Tests

Canonical forms, the *-algebra, evaluation, derivatives, Laplacians, the
heat semigroup and the text parser.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from errors import TracePolyError, TracePolyParseError
from matrices import hermitian_basis, inner, sample_gue
from tracepoly import (BiWord, LaplacianMode, OperatorTracePoly, ScalarTracePoly, cyclic_gradient,
                       evaluate_operator, evaluate_scalar, free_difference_quotient, heat_apply,
                       laplacian, parse_potential, parse_trace_poly)
from verify import finite_difference_laplacian

words = st.lists(st.integers(0, 1), min_size=1, max_size=5).map(tuple)
coefs = st.floats(-2.0, 2.0, allow_nan=False)


def random_tuple(seed: int, m: int = 2, N: int = 3) -> np.ndarray:
    return sample_gue(np.random.default_rng(seed), m, N)


class TestCanonicalForm:
    """Cyclic canonicalization and term merging."""

    def test_cyclic_rotations_are_equal(self):
        assert ScalarTracePoly.trace((0, 1, 1), 2) == ScalarTracePoly.trace((1, 0, 1), 2)
        assert ScalarTracePoly.trace((0, 1, 1), 2) == ScalarTracePoly.trace((1, 1, 0), 2)

    def test_equal_terms_merge_and_zeros_drop(self):
        f = ScalarTracePoly({((0, 1),): 1.0, ((1, 0),): -1.0, ((0,),): 2.0}, 2)
        assert f.terms == {((0,),): 2.0}

    def test_operator_words_keep_letter_order(self):
        assert OperatorTracePoly.word((0, 1), 2) != OperatorTracePoly.word((1, 0), 2)

    def test_letters_out_of_range_rejected(self):
        with pytest.raises(TracePolyError, match="Invalid"):
            ScalarTracePoly.trace((0, 3), 2)

    def test_immutable(self):
        f = ScalarTracePoly.trace((0,), 1)
        with pytest.raises(AttributeError):
            f.nvars = 3

    @given(words)
    def test_cyclic_invariance_of_evaluation(self, word):
        x = random_tuple(0)
        rotated = word[1:] + word[:1]
        a = evaluate_scalar(ScalarTracePoly.trace(word, 2), x)
        b = evaluate_scalar(ScalarTracePoly.trace(rotated, 2), x)
        assert abs(a - b) < 1e-10


class TestAlgebra:
    """Evaluation is a *-homomorphism."""

    @given(words, words, coefs, coefs)
    @settings(max_examples=40)
    def test_scalar_product_evaluates_to_product(self, w1, w2, a, b):
        x = random_tuple(1)
        f = ScalarTracePoly.trace(w1, 2, a) + 1.0
        g = ScalarTracePoly.trace(w2, 2, b)
        assert abs(evaluate_scalar(f * g, x) - evaluate_scalar(f, x) * evaluate_scalar(g, x)) < 1e-9

    @given(words, words)
    @settings(max_examples=40)
    def test_operator_product_evaluates_to_matrix_product(self, w1, w2):
        x = random_tuple(2)
        f = OperatorTracePoly.word(w1, 2) * ScalarTracePoly.trace(w2, 2)
        g = OperatorTracePoly.word(w2, 2)
        lhs = evaluate_operator(f * g, x)
        rhs = evaluate_operator(f, x) @ evaluate_operator(g, x)
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)

    @given(words, coefs)
    @settings(max_examples=40)
    def test_adjoint_is_conjugate_transpose(self, word, a):
        x = random_tuple(3)
        f = OperatorTracePoly.word(word, 2, a + 0.5j)
        np.testing.assert_allclose(evaluate_operator(f.adjoint(), x),
                                   evaluate_operator(f, x).conj().T, atol=1e-10)

    def test_batched_evaluation_matches_single(self):
        x = sample_gue(np.random.default_rng(4), 2, 3, size=(5,))
        f = parse_trace_poly("tr(x1 x2 x1) + 0.5*tr(x2^2)^2")
        batched = evaluate_scalar(f, x)
        assert batched.shape == (5,)
        for i in range(5):
            assert abs(batched[i] - evaluate_scalar(f, x[i])) < 1e-12

    def test_dimension_mismatch(self):
        with pytest.raises(TracePolyError, match="Dimension mismatch"):
            evaluate_scalar(ScalarTracePoly.trace((0,), 2), random_tuple(0, m=1))


class TestDerivatives:
    """Cyclic gradients, free difference quotients and the Leibniz rule."""

    def test_gradient_of_quadratic_is_identity(self):
        V = parse_potential("0.5*tr(x^2)")
        assert cyclic_gradient(V, 0).allclose(OperatorTracePoly.word((0,), 1))

    def test_gradient_matches_directional_derivative(self):
        V = parse_potential("0.5*tr(x1^2) + 0.5*tr(x2^2) + 0.2*tr(x1 x2 x1 x2) + 0.1*tr(x1^4)")
        rng = np.random.default_rng(5)
        eps = 1e-6
        for _ in range(20):
            x = sample_gue(rng, 2, 3)
            h = sample_gue(rng, 1, 3)[0]
            for j in range(2):
                step = np.zeros_like(x)
                step[j] = h
                numeric = (evaluate_scalar(V, x + eps * step) - evaluate_scalar(V, x - eps * step)).real / (2 * eps)
                D = evaluate_operator(cyclic_gradient(V, j), x)
                exact = float(np.real(inner(D[None], h[None])))
                assert abs(numeric - exact) <= 1e-6 * max(1.0, abs(exact))

    def test_gradient_requires_self_adjoint(self):
        with pytest.raises(TracePolyError, match="self-adjoint"):
            cyclic_gradient(ScalarTracePoly.trace((0, 0, 1), 2, 1j), 0)

    def test_difference_quotient_of_cube(self):
        assert free_difference_quotient((0, 0, 0), 0, 1) == BiWord({((), (0, 0)): 1, ((0,), (0,)): 1,
                                                                    ((0, 0), ()): 1}, 1)

    @given(words, words, st.integers(0, 1))
    def test_leibniz_rule(self, p, q, j):
        lhs = free_difference_quotient(p + q, j, 2)
        rhs = free_difference_quotient(p, j, 2).right_multiply(q) + free_difference_quotient(q, j, 2).left_multiply(p)
        assert lhs == rhs


class TestLaplacian:
    """L^(N) against finite differences and exact small cases."""

    def test_laplacian_of_quadratic(self):
        f = ScalarTracePoly.trace((0, 0), 1)
        assert laplacian(f, LaplacianMode.finite_n(4)).allclose(ScalarTracePoly.constant(2.0, 1))

    def test_laplacian_of_quartic(self):
        f = ScalarTracePoly.trace((0, 0, 0, 0), 1)
        expected = ScalarTracePoly({((0, 0),): 8.0, ((0,), (0,)): 4.0}, 1)
        assert laplacian(f, LaplacianMode.large_n()).allclose(expected)

    def test_cross_terms_scale_with_size(self):
        f = ScalarTracePoly({((0,), (0,)): 1.0}, 1)
        assert laplacian(f, LaplacianMode.finite_n(3)).allclose(ScalarTracePoly.constant(2.0 / 9.0, 1))
        assert laplacian(f, LaplacianMode.large_n()).allclose(ScalarTracePoly.constant(0.0, 1))

    @pytest.mark.parametrize("text", [
        "tr(x1^6) + 0.5*tr(x1^2)*tr(x1^4)",
        "tr(x1^2 x2 x1 x2) + 0.7*tr(x1 x2)*tr(x1 x2^2)",
        "x1^2 x2 + 0.5*tr(x1 x2)*x2^3",
    ])
    @pytest.mark.parametrize("N", [2, 3, 4])
    def test_matches_finite_differences(self, text, N):
        f = parse_trace_poly(text, n_x=2)
        x = random_tuple(N, m=2, N=N)
        evaluate = evaluate_scalar if isinstance(f, ScalarTracePoly) else evaluate_operator
        exact = np.asarray(evaluate(laplacian(f, LaplacianMode.finite_n(N)), x))
        numeric = np.asarray(finite_difference_laplacian(f, x))
        assert np.max(np.abs(exact - numeric)) <= 1e-5 * max(1.0, np.max(np.abs(numeric)))

    def test_partial_laplacian_acts_on_selected_variables(self):
        f = parse_trace_poly("tr(x1^2) + tr(x2^2)")
        assert laplacian(f, LaplacianMode.finite_n(2), variables=[1]).allclose(ScalarTracePoly.constant(2.0, 2))
        with pytest.raises(TracePolyError, match="Invalid variable index"):
            laplacian(f, LaplacianMode.finite_n(2), variables=[2])

    def test_basis_is_orthonormal(self):
        basis = hermitian_basis(3)
        gram = np.einsum('aij,bji->ab', basis, basis)
        np.testing.assert_allclose(gram, np.eye(9), atol=1e-12)


class TestHeat:
    """e^{tL/2} in closed form."""

    @pytest.mark.parametrize("t", [0.1, 1.0])
    def test_quartic_heat_finite_n(self, t):
        N = 3
        f = ScalarTracePoly.trace((0, 0, 0, 0), 1)
        expected = ScalarTracePoly({((0, 0, 0, 0),): 1.0, ((0, 0),): 4 * t, ((0,), (0,)): 2 * t,
                                    (): t * t * (2 + 1 / N ** 2)}, 1)
        assert heat_apply(f, t, LaplacianMode.finite_n(N)).allclose(expected, tol=1e-10)

    def test_heat_at_zero_is_identity(self):
        f = parse_trace_poly("tr(x1^3 x2) + x1 x2")
        assert heat_apply(f, 0.0, LaplacianMode.finite_n(2)).allclose(f)

    def test_heat_matches_monte_carlo(self):
        N, t = 3, 1.0
        f = parse_trace_poly("tr(x1^4) + tr(x1^2 x2^2)")
        rng = np.random.default_rng(6)
        x = sample_gue(rng, 2, N)
        exact = evaluate_scalar(heat_apply(f, t, LaplacianMode.finite_n(N)), x).real
        values = evaluate_scalar(f, x + np.sqrt(t) * sample_gue(rng, 2, N, size=(20000,))).real
        assert abs(values.mean() - exact) <= 4.5 * values.std() / np.sqrt(values.size)

    def test_invalid_arguments(self):
        f = ScalarTracePoly.trace((0,) * 14, 1)
        with pytest.raises(TracePolyError, match="Invalid degree"):
            heat_apply(f, 1.0, LaplacianMode.finite_n(2))
        with pytest.raises(TracePolyError, match="Invalid heat time"):
            heat_apply(ScalarTracePoly.trace((0,), 1), -1.0, LaplacianMode.finite_n(2))
        with pytest.raises(TracePolyError, match="Invalid matrix size"):
            LaplacianMode.finite_n(0)


class TestParser:
    """Text grammar and error reporting."""

    def test_parse_scalar_and_operator(self):
        f = parse_trace_poly("0.5*tr(x1^2) + 0.25*tr(x1 x2 x1 x2)")
        assert isinstance(f, ScalarTracePoly)
        assert f.terms == {((0, 0),): 0.5, ((0, 1, 0, 1),): 0.25}
        g = parse_trace_poly("tr(x1^2)*x1")
        assert isinstance(g, OperatorTracePoly)

    def test_y_variables_follow_x(self):
        f = parse_trace_poly("tr(x1 y1)", n_x=2, n_y=1)
        assert f.nvars == 3
        assert f.terms == {((0, 2),): 1.0}

    def test_unexpected_character_names_token(self):
        with pytest.raises(TracePolyParseError) as info:
            parse_trace_poly("tr(x1^2) + $")
        assert info.value.token == '$'
        assert info.value.column == 12

    def test_sum_inside_trace_rejected(self):
        with pytest.raises(TracePolyParseError, match="Only a word"):
            parse_trace_poly("tr(x1 + x2)")

    def test_variable_out_of_range(self):
        with pytest.raises(TracePolyParseError, match="Variable out of range"):
            parse_trace_poly("tr(x3)", n_x=2)

    def test_potential_must_be_scalar_and_self_adjoint(self):
        with pytest.raises(TracePolyError, match="scalar-valued"):
            parse_potential("x1^2")
        with pytest.raises(TracePolyError, match="not self-adjoint"):
            parse_potential("1j*tr(x1 x2 x2)")

    def test_printed_form_parses_back(self):
        f = parse_trace_poly("0.5*tr(x1^2) + 0.25*tr(x1 x2 x1 x2) - tr(x1)*tr(x2)")
        assert parse_trace_poly(str(f), n_x=2) == f

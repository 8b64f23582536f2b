"""Tests for matrix primitives, Loewner comparison and Lyapunov solvers."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _lib.errors import DimensionError, NotPositiveDefiniteError, NotSchurStableError, SingularMatrixError
from _lib.linalg import (
    Ordering,
    as_symmetric,
    check_lemma_a_plus_b,
    check_lemma_inverse_difference,
    check_matrix_inversion_lemma,
    check_optimal_gain,
    loewner_compare,
    lyapunov_residual,
    lyapunov_weight_identity_residual,
    require_positive_definite,
    solve_discrete_lyapunov,
    unvec,
    vec,
)


# ── Thresholds ──────────────────────────────────────────────────────

IDENTITY_RTOL = 1e-9
LYAPUNOV_RTOL = 1e-10


def _spd(rng, n, low=0.5, high=3.0):
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return (q * rng.uniform(low, high, n)) @ q.T


seeds = st.integers(min_value=0, max_value=2**32 - 1)


# ── Loewner order ────────────────────────────────────────────────────

class TestLoewnerCompare:
    """Orderings follow the eigenvalues of the difference."""

    def test_equal(self):
        a = np.diag([1.0, 2.0])
        verdict = loewner_compare(a, a)
        assert verdict.ordering is Ordering.EQ
        assert verdict.geq and verdict.leq

    def test_geq_and_leq(self):
        a = np.diag([2.0, 3.0])
        b = np.diag([1.0, 3.0])
        assert loewner_compare(a, b).ordering is Ordering.GEQ
        assert loewner_compare(b, a).ordering is Ordering.LEQ
        assert not loewner_compare(a, b).strictly_greater

    def test_strict(self):
        verdict = loewner_compare(np.diag([2.0, 4.0]), np.eye(2))
        assert verdict.strictly_greater
        assert verdict.satisfies(">")
        assert not verdict.satisfies("<")

    def test_indefinite(self):
        verdict = loewner_compare(np.diag([2.0, 0.0]), np.eye(2))
        assert verdict.ordering is Ordering.INDEFINITE
        assert verdict.min_eig_of_difference == pytest.approx(-1.0)

    def test_tolerance_absorbs_roundoff(self):
        a = np.eye(3)
        assert loewner_compare(a + 1e-13 * np.ones((3, 3)), a).ordering is Ordering.EQ

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            loewner_compare(np.eye(2), np.eye(3))

    def test_unknown_relation(self):
        with pytest.raises(ValueError):
            loewner_compare(np.eye(2), np.eye(2)).satisfies("~")


class TestSymmetry:
    def test_rejects_asymmetric(self):
        with pytest.raises(ValueError):
            as_symmetric(np.array([[1.0, 2.0], [0.0, 1.0]]))

    def test_scalar_becomes_matrix(self):
        assert as_symmetric(3.0).shape == (1, 1)

    def test_not_positive_definite(self):
        with pytest.raises(NotPositiveDefiniteError) as info:
            require_positive_definite(np.diag([1.0, -1.0]), "X", "tests", "check")
        assert "tests.check" in str(info.value)


# ── Matrix identities ────────────────────────────────────────────────

class TestMatrixIdentities:
    """The three inversion identities hold on random well-conditioned inputs."""

    @settings(max_examples=60, deadline=None)
    @given(seed=seeds)
    def test_inversion_lemma(self, seed):
        rng = np.random.default_rng(seed)
        n, p = int(rng.integers(1, 5)), int(rng.integers(1, 4))
        A, C = _spd(rng, n), _spd(rng, p)
        B = 0.3 * rng.standard_normal((n, p))
        assert check_matrix_inversion_lemma(A, B, C, B.T) < IDENTITY_RTOL

    @settings(max_examples=60, deadline=None)
    @given(seed=seeds, a=st.floats(min_value=-3.0, max_value=3.0))
    def test_a_plus_b(self, seed, a):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 5))
        assert check_lemma_a_plus_b(_spd(rng, n), _spd(rng, n), a) < IDENTITY_RTOL

    @settings(max_examples=60, deadline=None)
    @given(seed=seeds)
    def test_inverse_difference(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 5))
        assert check_lemma_inverse_difference(_spd(rng, n), _spd(rng, n)) < IDENTITY_RTOL

    def test_singular_input(self):
        with pytest.raises(SingularMatrixError):
            check_lemma_inverse_difference(np.zeros((2, 2)), np.eye(2))

    def test_non_conformable(self):
        with pytest.raises(DimensionError):
            check_matrix_inversion_lemma(np.eye(2), np.ones((3, 1)), np.eye(1), np.ones((1, 2)))


class TestOptimalGain:
    @settings(max_examples=40, deadline=None)
    @given(seed=seeds)
    def test_any_gain_is_no_better(self, seed):
        rng = np.random.default_rng(seed)
        n, m = int(rng.integers(1, 4)), int(rng.integers(1, 3))
        verdict = check_optimal_gain(_spd(rng, n), rng.standard_normal((m, n)), _spd(rng, m),
                                     rng.standard_normal((n, m)))
        assert verdict.geq


# ── Lyapunov equations ───────────────────────────────────────────────

class TestLyapunov:
    def test_vec_unvec(self):
        x = np.arange(6.0).reshape(2, 3)
        assert np.array_equal(unvec(vec(x), 2), x)
        assert vec(x).tolist() == [0.0, 3.0, 1.0, 4.0, 2.0, 5.0]

    def test_scalar_solution(self):
        X = solve_discrete_lyapunov(np.array([[0.5]]), np.array([[3.0]]))
        assert X[0, 0] == pytest.approx(4.0)

    @settings(max_examples=40, deadline=None)
    @given(seed=seeds, transpose=st.booleans())
    def test_random_fixed_point(self, seed, transpose):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 5))
        A = rng.standard_normal((n, n))
        Fbar = 0.9 * A / max(np.max(np.abs(np.linalg.eigvals(A))), 1e-3)
        G = _spd(rng, n)
        X = solve_discrete_lyapunov(Fbar, G, transpose)
        assert lyapunov_residual(Fbar, X, G, transpose) < LYAPUNOV_RTOL

    def test_weight_identity(self):
        Fbar = np.array([[0.5, 0.2], [-0.1, 0.3]])
        assert lyapunov_weight_identity_residual(Fbar) < LYAPUNOV_RTOL

    def test_unstable(self):
        with pytest.raises(NotSchurStableError):
            solve_discrete_lyapunov(np.array([[1.0]]), np.array([[1.0]]))

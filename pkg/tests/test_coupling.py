"""Maximum-coupling construction: consistency, maximality, edge cases."""

import numpy as np
import pytest
from scipy.optimize import linprog

from fldd.coupling import (coupling_matrix, coupling_rows_batch, deficit_dist,
                           expected_stay_mass, max_coupling_row)


def random_pair(rng, K):
    return rng.dirichlet(np.ones(K)), rng.dirichlet(np.ones(K))


class TestRow:
    def test_identity_when_marginals_equal(self):
        u = np.array([0.2, 0.3, 0.5])
        for k in range(3):
            row = max_coupling_row(u, u, k)
            want = np.zeros(3)
            want[k] = 1.0
            np.testing.assert_array_equal(row, want)

    def test_all_mass_must_move(self):
        row = max_coupling_row([0.0, 1.0], [1.0, 0.0], 0)
        np.testing.assert_array_equal(row, [0.0, 1.0])

    def test_worked_two_category_example(self):
        u_s, u_t = [0.2, 0.8], [0.6, 0.4]
        np.testing.assert_allclose(max_coupling_row(u_s, u_t, 0), [1 / 3, 2 / 3])
        np.testing.assert_allclose(max_coupling_row(u_s, u_t, 1), [0.0, 1.0])

    def test_conditioning_on_zero_probability_rejected(self):
        with pytest.raises(ValueError, match="zero-probability"):
            max_coupling_row([0.5, 0.5], [1.0, 0.0], 1)

    def test_diagonal_entry_formula(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            K = int(rng.integers(2, 8))
            u_s, u_t = random_pair(rng, K)
            for k in range(K):
                row = max_coupling_row(u_s, u_t, k)
                assert row[k] == pytest.approx(min(u_s[k], u_t[k]) / u_t[k], abs=1e-12)

    def test_no_offdiagonal_when_destination_has_surplus(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            K = int(rng.integers(2, 8))
            u_s, u_t = random_pair(rng, K)
            for k in range(K):
                if u_s[k] >= u_t[k]:
                    row = max_coupling_row(u_s, u_t, k)
                    want = np.zeros(K)
                    want[k] = 1.0
                    np.testing.assert_allclose(row, want, atol=1e-12)


class TestMatrix:
    def test_identity_matrix_for_equal_marginals(self):
        u = np.array([0.1, 0.4, 0.5])
        np.testing.assert_array_equal(coupling_matrix(u, u), np.eye(3))

    def test_worked_example_matrix(self):
        M = coupling_matrix([0.2, 0.8], [0.6, 0.4])
        np.testing.assert_allclose(M, [[1 / 3, 2 / 3], [0.0, 1.0]])

    def test_marginal_consistency_k7(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            u_s, u_t = random_pair(rng, 7)
            M = coupling_matrix(u_s, u_t)
            # direct-summation oracle: mixing rows by u_t must reproduce u_s
            np.testing.assert_allclose(u_t @ M, u_s, atol=1e-12)

    def test_rows_are_simplexes(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            K = int(rng.integers(2, 17))
            u_s, u_t = random_pair(rng, K)
            M = coupling_matrix(u_s, u_t)
            assert np.all(M >= 0)
            np.testing.assert_allclose(M.sum(axis=1), np.ones(K), atol=1e-12)

    def test_matches_row_function(self):
        rng = np.random.default_rng(4)
        u_s, u_t = random_pair(rng, 5)
        M = coupling_matrix(u_s, u_t)
        for k in range(5):
            np.testing.assert_allclose(M[k], max_coupling_row(u_s, u_t, k), atol=1e-15)


class TestStayMass:
    def test_equal_marginals_stay_with_certainty(self):
        assert expected_stay_mass([0.3, 0.7], [0.3, 0.7]) == 1.0

    def test_disjoint_marginals_never_stay(self):
        assert expected_stay_mass([0.0, 1.0], [1.0, 0.0]) == 0.0

    def test_worked_example(self):
        assert expected_stay_mass([0.2, 0.8], [0.6, 0.4]) == pytest.approx(0.6)

    def test_equals_one_minus_tv(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            K = int(rng.integers(2, 10))
            u_s, u_t = random_pair(rng, K)
            tv = 0.5 * np.abs(u_s - u_t).sum()
            assert expected_stay_mass(u_s, u_t) == pytest.approx(1.0 - tv, abs=1e-12)

    def test_plan_achieves_stay_mass(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            K = int(rng.integers(2, 10))
            u_s, u_t = random_pair(rng, K)
            M = coupling_matrix(u_s, u_t)
            stay = float((u_t * np.diag(M)).sum())
            assert stay == pytest.approx(expected_stay_mass(u_s, u_t), abs=1e-12)


def lp_max_stay(u_s, u_t):
    """Brute-force LP over all couplings: maximize P(dest == source)."""
    K = len(u_s)
    c = np.zeros(K * K)
    for k in range(K):
        c[k * K + k] = -1.0  # maximize diagonal mass
    A_eq = []
    b_eq = []
    for k in range(K):  # row sums: source marginal u_t
        row = np.zeros(K * K)
        row[k * K:(k + 1) * K] = 1.0
        A_eq.append(row)
        b_eq.append(u_t[k])
    for j in range(K):  # column sums: destination marginal u_s
        col = np.zeros(K * K)
        col[j::K] = 1.0
        A_eq.append(col)
        b_eq.append(u_s[j])
    res = linprog(c, A_eq=np.array(A_eq), b_eq=np.array(b_eq),
                  bounds=[(0, None)] * (K * K), method="highs")
    assert res.success
    return -res.fun


def test_no_coupling_exceeds_stay_mass_lp_oracle():
    rng = np.random.default_rng(7)
    for _ in range(20):
        K = int(rng.integers(2, 5))
        u_s, u_t = random_pair(rng, K)
        best = lp_max_stay(u_s, u_t)
        assert expected_stay_mass(u_s, u_t) == pytest.approx(best, abs=1e-9)


class TestDeficitDist:
    def test_support_only_where_destination_needs_mass(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            u_s, u_t = random_pair(rng, 6)
            m = deficit_dist(u_s, u_t)
            assert np.all((m > 0) == (u_s > u_t))
            assert m.sum() == pytest.approx(1.0, abs=1e-12)

    def test_zero_vector_when_no_deficit(self):
        u = np.array([0.5, 0.5])
        np.testing.assert_array_equal(deficit_dist(u, u), [0.0, 0.0])


class TestBatch:
    def test_matches_single_row_calls(self):
        rng = np.random.default_rng(9)
        B, D, K = 5, 3, 4
        u_s = rng.dirichlet(np.ones(K), size=(B, D))
        u_t = rng.dirichlet(np.ones(K), size=(B, D))
        k = rng.integers(0, K, size=(B, D))
        rows = coupling_rows_batch(u_s, u_t, k)
        for b in range(B):
            for d in range(D):
                want = max_coupling_row(u_s[b, d], u_t[b, d], int(k[b, d]))
                np.testing.assert_allclose(rows[b, d], want, atol=1e-12)

    def test_zero_probability_conditioning_falls_back_to_identity(self):
        u_s = np.array([[[0.5, 0.5, 0.0]]])
        u_t = np.array([[[1.0, 0.0, 0.0]]])
        rows = coupling_rows_batch(u_s, u_t, np.array([[2]]))
        np.testing.assert_array_equal(rows[0, 0], [0.0, 0.0, 1.0])

"""
Unit tests for the dense matrix primitives
"""
import unittest

import numpy as np

from src.errors import DimensionError, ParameterError
from src.matrix_core import SeededRng, as_matrix, frobenius_norm, hadamard, matmul, qr_thin
from src.oracles import naive_matmul


class TestSeededRng(unittest.TestCase):
    """Test cases for SeededRng"""

    def test_same_seed_same_stream(self):
        """Test that equal seeds give identical samples"""
        a = SeededRng(42).standard_normal(5, 3)
        b = SeededRng(42).standard_normal(5, 3)
        np.testing.assert_array_equal(a, b)

    def test_different_seeds_differ(self):
        """Test that different seeds give different samples"""
        self.assertFalse(np.array_equal(SeededRng(1).standard_normal(4, 4), SeededRng(2).standard_normal(4, 4)))

    def test_spawn_is_deterministic_and_keyed(self):
        """Test derived streams"""
        rng = SeededRng(7)
        self.assertEqual(rng.spawn(3).seed, SeededRng(7).spawn(3).seed)
        self.assertNotEqual(rng.spawn(3).seed, rng.spawn(4).seed)

    def test_choice_is_distinct(self):
        """Test that choice draws without replacement"""
        picked = SeededRng(0).choice(8, 5)
        self.assertEqual(len(set(picked)), 5)
        self.assertTrue(all(0 <= i < 8 for i in picked))

    def test_negative_seed_rejected(self):
        """Test seed validation"""
        with self.assertRaises(ParameterError):
            SeededRng(-1)


class TestMatmul(unittest.TestCase):
    """Test cases for matmul and hadamard"""

    def setUp(self):
        """Set up test fixtures"""
        self.rng = SeededRng(3)

    def test_identity(self):
        """Test I x A = A"""
        a = self.rng.standard_normal(3, 4)
        np.testing.assert_array_equal(matmul(np.eye(3), a), a)

    def test_hand_checked_product(self):
        """Test a 2x2 by 2x1 product"""
        np.testing.assert_array_equal(matmul([[1, 2], [3, 4]], [[0], [1]]), [[2.0], [4.0]])

    def test_against_triple_loop(self):
        """Test against the triple-loop oracle"""
        a = self.rng.standard_normal(17, 5)
        b = self.rng.standard_normal(5, 9)
        self.assertLessEqual(np.max(np.abs(matmul(a, b) - naive_matmul(a, b))), 1e-12)

    def test_associativity(self):
        """Test (AB)C = A(BC) within rounding"""
        a, b, c = (self.rng.standard_normal(6, 6) for _ in range(3))
        left = matmul(matmul(a, b), c)
        right = matmul(a, matmul(b, c))
        self.assertLessEqual(frobenius_norm(left - right) / frobenius_norm(left), 1e-9)

    def test_shape_mismatch(self):
        """Test dimension errors"""
        with self.assertRaises(DimensionError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))
        with self.assertRaises(DimensionError):
            hadamard(np.ones((2, 3)), np.ones((3, 2)))

    def test_hadamard(self):
        """Test elementwise products"""
        a = self.rng.standard_normal(3, 3)
        np.testing.assert_array_equal(hadamard(a, np.ones((3, 3))), a)
        np.testing.assert_array_equal(hadamard(a, np.zeros((3, 3))), np.zeros((3, 3)))
        np.testing.assert_array_equal(hadamard([[2, 3]], [[4, 5]]), [[8.0, 15.0]])

    def test_inputs_not_mutated(self):
        """Test purity"""
        a = self.rng.standard_normal(4, 4)
        before = a.copy()
        matmul(a, a)
        hadamard(a, a)
        qr_thin(a)
        np.testing.assert_array_equal(a, before)


class TestFrobeniusNorm(unittest.TestCase):
    """Test cases for frobenius_norm"""

    def test_values(self):
        """Test hand-checkable norms"""
        self.assertEqual(frobenius_norm(np.zeros((3, 2))), 0.0)
        self.assertAlmostEqual(frobenius_norm([[3, 4]]), 5.0, places=15)

    def test_against_sum(self):
        """Test against an elementwise sum"""
        a = SeededRng(5).standard_normal(7, 11)
        expected = np.sqrt(sum(x * x for x in a.ravel()))
        self.assertLessEqual(abs(frobenius_norm(a) - expected) / expected, 1e-12)

    def test_one_dimensional_rejected(self):
        """Test that 1-D input is not a matrix"""
        with self.assertRaises(DimensionError):
            as_matrix(np.ones(3))


class TestQrThin(unittest.TestCase):
    """Test cases for qr_thin"""

    def assertOrthonormal(self, q, tol=1e-10):
        gram = q.T @ q
        self.assertLessEqual(np.max(np.abs(gram - np.eye(q.shape[1]))), tol)

    def test_identity(self):
        """Test Q of the identity"""
        np.testing.assert_allclose(qr_thin(np.eye(4)), np.eye(4), atol=1e-15)

    def test_single_column(self):
        """Test normalisation of one column"""
        np.testing.assert_allclose(qr_thin([[3.0], [4.0]]), [[0.6], [0.8]], atol=1e-15)

    def test_random_orthonormal_and_spans_input(self):
        """Test orthonormality and A = Q R with R upper triangular, non-negative diagonal"""
        a = SeededRng(11).standard_normal(64, 8)
        q = qr_thin(a)
        self.assertEqual(q.shape, (64, 8))
        self.assertOrthonormal(q)
        r = q.T @ a
        np.testing.assert_allclose(np.tril(r, -1), 0.0, atol=1e-12)
        self.assertTrue(np.all(np.diag(r) > 0))
        np.testing.assert_allclose(q @ r, a, atol=1e-12)

    def test_large_input(self):
        """Test orthonormality on a tall input"""
        self.assertOrthonormal(qr_thin(SeededRng(1).standard_normal(1024, 64)))

    def test_rank_deficient_completed(self):
        """Test that dependent columns are completed with orthonormal directions"""
        base = SeededRng(2).standard_normal(10, 2)
        a = np.hstack([base, base[:, :1] * 2.0, np.zeros((10, 1))])
        q = qr_thin(a)
        self.assertOrthonormal(q)
        # The leading columns still span the independent input columns
        np.testing.assert_allclose(q[:, :2] @ (q[:, :2].T @ base), base, atol=1e-12)

    def test_zero_matrix(self):
        """Test that a zero input yields an orthonormal basis"""
        self.assertOrthonormal(qr_thin(np.zeros((6, 3))))

    def test_completion_is_seeded(self):
        """Test determinism of the completion"""
        a = np.zeros((5, 2))
        np.testing.assert_array_equal(qr_thin(a, SeededRng(9)), qr_thin(a, SeededRng(9)))

    def test_wide_input_rejected(self):
        """Test the rows >= cols precondition"""
        with self.assertRaises(DimensionError):
            qr_thin(np.ones((2, 3)))


if __name__ == '__main__':
    unittest.main()

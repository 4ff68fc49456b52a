"""
Tests for the dense linear algebra layer: SVD fidelity and input validation.
"""
import unittest

import numpy as np

from errors import ShapeMismatchError, NonFiniteError
from linalg import (
    as_matrix,
    matmul,
    svd,
    singular_values,
    frobenius_norm,
    relative_error,
    reconstruct,
    orthonormality_defect,
)


class TestSvdFidelity(unittest.TestCase):
    """Reconstruction and orthonormality on random matrices"""

    def setUp(self):
        self.rng = np.random.default_rng(7)

    def test_reconstruction_and_orthonormality(self):
        """U diag(S) V^T reproduces A and U, V are orthonormal up to 768x768"""
        for shape in [(1, 1), (5, 3), (3, 5), (64, 64), (200, 40), (768, 768)]:
            a = self.rng.standard_normal(shape)
            u, s, v = svd(a, "random")
            self.assertLessEqual(relative_error(reconstruct(u, s, v), a), 1e-10, shape)
            self.assertLessEqual(orthonormality_defect(u), 1e-10, shape)
            self.assertLessEqual(orthonormality_defect(v), 1e-10, shape)

    def test_thin_shapes(self):
        """V holds right singular vectors as columns"""
        a = self.rng.standard_normal((10, 4))
        u, s, v = svd(a)
        self.assertEqual(u.shape, (10, 4))
        self.assertEqual(s.shape, (4,))
        self.assertEqual(v.shape, (4, 4))
        np.testing.assert_allclose(a @ v[:, 0], s[0] * u[:, 0], atol=1e-12)

    def test_singular_values_sorted_non_negative(self):
        """Values-only path agrees with the full decomposition"""
        a = self.rng.standard_normal((30, 50))
        values = singular_values(a)
        self.assertTrue(np.all(np.diff(values) <= 0))
        self.assertTrue(np.all(values >= 0))
        np.testing.assert_allclose(values, svd(a)[1], rtol=1e-12)

    def test_scaling(self):
        """svd(c A) has singular values |c| svd(A)"""
        a = self.rng.standard_normal((12, 7))
        for c in (3.0, -0.5):
            np.testing.assert_allclose(singular_values(c * a), abs(c) * singular_values(a), rtol=1e-12)

    def test_products_and_norms(self):
        """Hand-computed product, identity and zero cases, Frobenius norm"""
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(matmul(a, np.array([[0.0, 1.0], [1.0, 0.0]])), [[2.0, 1.0], [4.0, 3.0]])
        np.testing.assert_array_equal(matmul(np.eye(2), a), a)
        np.testing.assert_array_equal(matmul(a, np.zeros((2, 3))), np.zeros((2, 3)))
        self.assertEqual(frobenius_norm(np.array([[3.0, 4.0]])), 5.0)

    def test_diagonal_spectrum(self):
        self.assertEqual(list(singular_values(np.diag([3.0, 1.0, 2.0]))), [3.0, 2.0, 1.0])

    def test_rank_deficient(self):
        """Zero matrix has all-zero singular values and zero relative error"""
        zeros = np.zeros((4, 3))
        self.assertTrue(np.all(singular_values(zeros) == 0))
        self.assertEqual(relative_error(zeros, zeros), 0.0)


class TestValidation(unittest.TestCase):
    """Shape and finiteness checks at the module boundary"""

    def test_rejects_non_matrices(self):
        """1-D and empty inputs are shape errors"""
        with self.assertRaises(ShapeMismatchError):
            as_matrix(np.ones(3))
        with self.assertRaises(ShapeMismatchError):
            as_matrix(np.ones((0, 3)))

    def test_rejects_non_finite(self):
        """NaN entries are numeric errors naming the operand"""
        a = np.ones((2, 2))
        a[0, 1] = np.nan
        with self.assertRaises(NonFiniteError) as ctx:
            svd(a, "layers.0.attn.wq")
        self.assertIn("layers.0.attn.wq", str(ctx.exception))
        self.assertEqual(ctx.exception.exit_code, 4)

    def test_matmul_mismatch_reports_shapes(self):
        """Inner dimension mismatch names both shapes"""
        with self.assertRaises(ShapeMismatchError) as ctx:
            matmul(np.ones((2, 3)), np.ones((4, 2)))
        self.assertIn("2x3", str(ctx.exception))
        self.assertIn("4x2", str(ctx.exception))

    def test_promotes_float32(self):
        """32-bit inputs are analyzed in 64-bit"""
        self.assertEqual(as_matrix(np.ones((2, 2), dtype=np.float32)).dtype, np.float64)


if __name__ == "__main__":
    unittest.main()

"""Matrix exponential, Frechet derivative, and adjoint."""

import numpy as np
import pytest
import scipy.linalg

from lieops.expm import expm, expm_frechet, expm_vjp


class TestExpm:
    def test_zero_matrix_is_identity(self):
        assert np.array_equal(expm(np.zeros((2, 2))), np.eye(2))

    def test_rotation_closed_form(self):
        A = (np.pi / 2) * np.array([[0.0, -1.0], [1.0, 0.0]])
        expected = np.array([[0.0, -1.0], [1.0, 0.0]])
        assert np.max(np.abs(expm(A) - expected)) < 1e-10

    def test_diagonal(self):
        E = expm(np.diag([1.0, -1.0]))
        np.testing.assert_allclose(E, np.diag([np.e, 1.0 / np.e]), rtol=1e-14)

    def test_matches_scipy_reference(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            A = rng.normal(size=(5, 5)) * rng.uniform(0.1, 3.0)
            np.testing.assert_allclose(expm(A), scipy.linalg.expm(A), rtol=1e-10, atol=1e-12)

    def test_inverse_property(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            A = rng.normal(size=(4, 4))
            A *= rng.uniform(0.0, 5.0) / np.linalg.norm(A)
            err = np.max(np.abs(expm(A) @ expm(-A) - np.eye(4)))
            assert err < 1e-8

    def test_antisymmetric_gives_orthogonal(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            S = rng.normal(size=(5, 5))
            S = S - S.T
            Q = expm(S)
            assert np.linalg.norm(Q.T @ Q - np.eye(5)) < 1e-8

    def test_batch_matches_single_bitwise(self):
        rng = np.random.default_rng(3)
        A = rng.normal(size=(40, 4, 4)) * rng.uniform(0.1, 8.0, size=(40, 1, 1))
        batched = expm(A)
        singles = np.stack([expm(a) for a in A])
        assert np.array_equal(batched, singles)

    def test_blockdiag_equals_blockwise_bitwise(self):
        # Exponentiating a stack of blocks is the block-diagonal exponential;
        # it must agree bitwise with doing each block alone.
        rng = np.random.default_rng(4)
        blocks = rng.normal(size=(6, 3, 3))
        assert np.array_equal(expm(blocks), np.stack([expm(b) for b in blocks]))

    def test_rejects_nonfinite(self):
        A = np.array([[0.0, np.nan], [0.0, 0.0]])
        with pytest.raises(ValueError):
            expm(A)

    def test_rejects_nonsquare(self):
        with pytest.raises(ValueError):
            expm(np.zeros((2, 3)))


class TestFrechet:
    def test_zero_direction(self):
        rng = np.random.default_rng(5)
        A = rng.normal(size=(3, 3))
        _, L = expm_frechet(A, np.zeros((3, 3)))
        assert np.allclose(L, 0.0)

    def test_at_zero_is_direction(self):
        E = np.random.default_rng(6).normal(size=(3, 3))
        _, L = expm_frechet(np.zeros((3, 3)), E)
        np.testing.assert_allclose(L, E, rtol=1e-12)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        h = 1e-5
        for _ in range(10):
            A = rng.normal(size=(3, 3))
            A *= min(1.0, 3.0 / np.linalg.norm(A))
            E = rng.normal(size=(3, 3))
            _, L = expm_frechet(A, E)
            fd = (expm(A + h * E) - expm(A - h * E)) / (2 * h)
            assert np.linalg.norm(L - fd) / np.linalg.norm(fd) < 1e-6

    def test_linear_in_direction(self):
        rng = np.random.default_rng(8)
        A = rng.normal(size=(4, 4))
        E1 = rng.normal(size=(4, 4))
        E2 = rng.normal(size=(4, 4))
        _, L1 = expm_frechet(A, E1)
        _, L2 = expm_frechet(A, E2)
        _, L12 = expm_frechet(A, 2.0 * E1 + 0.5 * E2)
        np.testing.assert_allclose(L12, 2.0 * L1 + 0.5 * L2, rtol=1e-9, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            expm_frechet(np.zeros((2, 2)), np.zeros((3, 3)))


class TestVjp:
    def test_zero_cotangent(self):
        A = np.random.default_rng(9).normal(size=(3, 3))
        assert np.allclose(expm_vjp(A, np.zeros((3, 3))), 0.0)

    def test_at_zero_is_identity_map(self):
        G = np.random.default_rng(10).normal(size=(3, 3))
        np.testing.assert_allclose(expm_vjp(np.zeros((3, 3)), G), G, rtol=1e-12)

    def test_adjoint_identity(self):
        rng = np.random.default_rng(11)
        A = rng.normal(size=(4, 4))
        G = rng.normal(size=(4, 4))
        adj = expm_vjp(A, G)
        for _ in range(100):
            E = rng.normal(size=(4, 4))
            _, L = expm_frechet(A, E)
            lhs = np.sum(G * L)
            rhs = np.sum(adj * E)
            assert abs(lhs - rhs) / abs(lhs) < 1e-8

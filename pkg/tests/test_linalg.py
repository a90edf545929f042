"""Tests for dense containers, linear maps, and the Krylov/dense solvers."""

import numpy as np
import pytest

from diffopt.linalg import (
    LinearMap,
    SingularMatrixError,
    bicgstab_solve,
    cg_solve,
    dense_matrix,
    dense_solve,
    dense_vector,
    gmres_solve,
    materialize,
    normal_cg_solve,
)


class TestContainers:
    def test_vector_roundtrip(self):
        v = dense_vector([1.0, 2.5, -3.0])
        np.testing.assert_allclose(v, [1.0, 2.5, -3.0])
        assert v.dtype == np.float64

    def test_vector_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            dense_vector([1.0, np.nan])
        with pytest.raises(ValueError):
            dense_vector([np.inf, 0.0])

    def test_vector_rejects_empty_and_2d(self):
        with pytest.raises(ValueError):
            dense_vector([])
        with pytest.raises(ValueError):
            dense_vector([[1.0, 2.0]])

    def test_matrix_column_major(self):
        m = dense_matrix([[1.0, 2.0], [3.0, 4.0]])
        assert m.flags.f_contiguous
        np.testing.assert_allclose(m, [[1.0, 2.0], [3.0, 4.0]])

    def test_matrix_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            dense_matrix([[1.0, np.nan], [0.0, 1.0]])


class TestLinearMap:
    def test_from_matrix_apply_and_transpose(self):
        a = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        op = LinearMap.from_matrix(a)
        v = np.array([1.0, -1.0, 2.0])
        w = np.array([1.0, 3.0])
        np.testing.assert_allclose(op.apply(v), a @ v)
        np.testing.assert_allclose(op.apply_transpose(w), a.T @ w)

    def test_synthesized_transpose_matches_explicit(self):
        """Column materialization must reproduce the true adjoint."""
        rng = np.random.default_rng(0)
        a = rng.standard_normal((4, 3))
        op = LinearMap(4, 3, lambda v: a @ v)  # no transpose supplied
        w = rng.standard_normal(4)
        np.testing.assert_allclose(op.apply_transpose(w), a.T @ w, atol=1e-14)

    def test_adjoint_identity_random_pairs(self):
        """<w, Av> == <A^T w, v> within 1e-10 * |v||w| over 100 draws."""
        rng = np.random.default_rng(1)
        a = rng.standard_normal((5, 7))
        for op in (LinearMap.from_matrix(a), LinearMap(5, 7, lambda v: a @ v)):
            for _ in range(100):
                v = rng.standard_normal(7)
                w = rng.standard_normal(5)
                lhs = w @ op.apply(v)
                rhs = op.apply_transpose(w) @ v
                bound = 1e-10 * np.linalg.norm(v) * np.linalg.norm(w)
                assert abs(lhs - rhs) <= bound

    def test_materialize(self):
        a = np.array([[0.0, 1.0], [-1.0, 0.0], [2.0, 2.0]])
        np.testing.assert_allclose(materialize(LinearMap.from_matrix(a)), a)


class TestCg:
    def test_identity(self):
        x, rep = cg_solve(LinearMap.identity(3), np.array([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(x, [1.0, 2.0, 3.0], atol=1e-10)
        assert rep.converged

    def test_2x2_spd(self):
        """[[4,1],[1,3]] x = [1,2]  =>  x = [1/11, 7/11]."""
        op = LinearMap.from_matrix(np.array([[4.0, 1.0], [1.0, 3.0]]))
        x, rep = cg_solve(op, np.array([1.0, 2.0]))
        np.testing.assert_allclose(x, [1.0 / 11.0, 7.0 / 11.0], atol=1e-10)
        assert rep.converged
        assert not rep.used_least_squares_fallback

    def test_zero_rhs(self):
        op = LinearMap.from_matrix(np.diag([2.0, 2.0]))
        x, rep = cg_solve(op, np.zeros(2))
        np.testing.assert_allclose(x, [0.0, 0.0])
        assert rep.converged
        assert rep.iterations == 0

    def test_random_spd_converges_fast(self):
        """Eigenvalues in [0.1, 10]: residual <= 1e-8 within d+5 iterations."""
        rng = np.random.default_rng(2)
        for d in (4, 16, 64):
            q, _ = np.linalg.qr(rng.standard_normal((d, d)))
            eigs = rng.uniform(0.1, 10.0, size=d)
            a = (q * eigs) @ q.T
            b = rng.standard_normal(d)
            x, rep = cg_solve(LinearMap.from_matrix(a), b, tol=1e-10)
            assert rep.converged
            assert rep.iterations <= d + 5
            assert np.linalg.norm(a @ x - b) <= 1e-8

    def test_nonconvergence_reported(self):
        op = LinearMap.from_matrix(np.diag([1.0, 1e6]))
        _, rep = cg_solve(op, np.array([1.0, 1.0]), tol=1e-14, max_iter=1)
        assert not rep.converged


class TestGmres:
    def test_identity(self):
        x, rep = gmres_solve(LinearMap.identity(2), np.array([5.0, -1.0]))
        np.testing.assert_allclose(x, [5.0, -1.0], atol=1e-10)
        assert rep.converged

    def test_skew(self):
        """[[0,1],[-1,0]] x = [1,0]  =>  x = [0,1]."""
        op = LinearMap.from_matrix(np.array([[0.0, 1.0], [-1.0, 0.0]]))
        x, rep = gmres_solve(op, np.array([1.0, 0.0]))
        np.testing.assert_allclose(x, [0.0, 1.0], atol=1e-10)
        assert rep.converged

    def test_diagonal(self):
        op = LinearMap.from_matrix(np.diag([2.0, 3.0]))
        x, rep = gmres_solve(op, np.array([2.0, 3.0]))
        np.testing.assert_allclose(x, [1.0, 1.0], atol=1e-10)
        assert rep.converged

    def test_restart_cycle(self):
        """Convergence with a restart shorter than the dimension."""
        rng = np.random.default_rng(3)
        a = np.eye(12) + 0.05 * rng.standard_normal((12, 12))
        b = rng.standard_normal(12)
        x, rep = gmres_solve(LinearMap.from_matrix(a), b, restart=4)
        assert rep.converged
        assert rep.iterations > 4  # crossed at least one restart boundary
        assert np.linalg.norm(a @ x - b) <= 1e-9

    def test_agrees_with_dense_solve(self):
        """Well-conditioned nonsymmetric systems, 1e-6 relative agreement."""
        rng = np.random.default_rng(4)
        for d in (3, 8, 32):
            a = np.eye(d) + 0.2 * rng.standard_normal((d, d))
            b = rng.standard_normal(d)
            ref = dense_solve(a, b)
            x, rep = gmres_solve(LinearMap.from_matrix(a), b)
            assert rep.converged
            assert np.linalg.norm(x - ref) <= 1e-6 * np.linalg.norm(ref)


class TestBicgstab:
    def test_identity(self):
        x, rep = bicgstab_solve(LinearMap.identity(2), np.array([5.0, -1.0]))
        np.testing.assert_allclose(x, [5.0, -1.0], atol=1e-10)
        assert rep.converged

    def test_diagonal(self):
        op = LinearMap.from_matrix(np.diag([2.0, 3.0]))
        x, rep = bicgstab_solve(op, np.array([2.0, 3.0]))
        np.testing.assert_allclose(x, [1.0, 1.0], atol=1e-10)
        assert rep.converged

    def test_skew_breaks_down(self):
        """The stabilization coefficient s^T A s / |As|^2 vanishes on
        skew-symmetric systems, so breakdown is reported and callers use
        the normal-equations fallback instead."""
        op = LinearMap.from_matrix(np.array([[0.0, 1.0], [-1.0, 0.0]]))
        _, rep = bicgstab_solve(op, np.array([1.0, 0.0]))
        assert not rep.converged

    def test_agrees_with_dense_solve(self):
        rng = np.random.default_rng(5)
        for d in (3, 8, 32):
            a = np.eye(d) + 0.2 * rng.standard_normal((d, d))
            b = rng.standard_normal(d)
            ref = dense_solve(a, b)
            x, rep = bicgstab_solve(LinearMap.from_matrix(a), b)
            assert rep.converged
            assert np.linalg.norm(x - ref) <= 1e-6 * np.linalg.norm(ref)


class TestNormalCg:
    def test_identity(self):
        x, rep = normal_cg_solve(LinearMap.identity(2), np.array([1.0, 1.0]))
        np.testing.assert_allclose(x, [1.0, 1.0], atol=1e-10)
        assert rep.converged
        assert rep.used_least_squares_fallback

    def test_singular_minimum_norm(self):
        """Singular [[1,0],[0,0]] with consistent rhs [1,0]: the iterates
        stay in the row space, giving the minimum-norm solution [1,0]."""
        op = LinearMap.from_matrix(np.array([[1.0, 0.0], [0.0, 0.0]]))
        x, rep = normal_cg_solve(op, np.array([1.0, 0.0]))
        np.testing.assert_allclose(x, [1.0, 0.0], atol=1e-10)
        assert rep.converged

    def test_scalar(self):
        op = LinearMap.from_matrix(np.array([[2.0]]))
        x, rep = normal_cg_solve(op, np.array([4.0]))
        np.testing.assert_allclose(x, [2.0], atol=1e-10)
        assert rep.converged

    def test_skew_system_recovered(self):
        """Normal equations of the skew matrix are the identity, so the
        system BiCGSTAB breaks down on is solved exactly here."""
        op = LinearMap.from_matrix(np.array([[0.0, 1.0], [-1.0, 0.0]]))
        x, rep = normal_cg_solve(op, np.array([1.0, 0.0]))
        np.testing.assert_allclose(x, [0.0, 1.0], atol=1e-10)
        assert rep.converged

    def test_inconsistent_least_squares(self):
        """Overdetermined residual minimizer: argmin |Ax - b|."""
        a = np.array([[1.0], [1.0]])
        x, rep = normal_cg_solve(LinearMap.from_matrix(a), np.array([0.0, 2.0]))
        np.testing.assert_allclose(x, [1.0], atol=1e-10)
        assert rep.converged


class TestDenseSolve:
    def test_identity(self):
        np.testing.assert_allclose(dense_solve(np.eye(2), np.eye(2)), np.eye(2))

    def test_diagonal_columns(self):
        a = np.array([[2.0, 0.0], [0.0, 4.0]])
        b = np.array([[2.0], [4.0]])
        np.testing.assert_allclose(dense_solve(a, b), [[1.0], [1.0]])

    def test_singular_raises(self):
        a = np.array([[1.0, 1.0], [1.0, 1.0]])
        with pytest.raises(SingularMatrixError):
            dense_solve(a, np.array([[1.0], [0.0]]))

    def test_vector_rhs(self):
        a = np.array([[3.0, 1.0], [1.0, 2.0]])
        x = dense_solve(a, np.array([4.0, 3.0]))
        np.testing.assert_allclose(a @ x, [4.0, 3.0], atol=1e-12)

"""Tests for tagged dual-number forward mode and its second-order products."""

import numpy as np
import pytest

from diffopt import autodiff as ad
from diffopt.autodiff import (
    DiffFn2,
    DualVector,
    ScalarFn2,
    check_gradient,
    check_user_closures,
    cross_jvp,
    finite_diff_jacobian,
    grad_x,
    hvp_x,
    jvp_theta,
    jvp_x,
    vjp_x,
)


def fn2(eval, dim_x, dim_theta, dim_out, **kw):
    return DiffFn2(eval=eval, dim_x=dim_x, dim_theta=dim_theta,
                   dim_out=dim_out, **kw)


class TestJvpX:
    def test_identity(self):
        fn = fn2(lambda x, t: x, 3, 1, 3)
        v = np.array([1.0, -2.0, 0.5])
        np.testing.assert_allclose(jvp_x(fn, np.zeros(3), np.zeros(1), v), v)

    def test_elementwise_square(self):
        """d(x*x) v = 2 x v."""
        fn = fn2(lambda x, t: ad.mul(x, x), 1, 1, 1)
        out = jvp_x(fn, np.array([3.0]), np.zeros(1), np.array([1.0]))
        np.testing.assert_allclose(out, [6.0])

    def test_scalar_times_vector(self):
        fn = fn2(lambda x, t: ad.mul(t[0], x), 1, 1, 1)
        out = jvp_x(fn, np.array([5.0]), np.array([2.0]), np.array([1.0]))
        np.testing.assert_allclose(out, [2.0])

    def test_dimension_mismatch(self):
        fn = fn2(lambda x, t: x, 3, 1, 3)
        with pytest.raises(ValueError):
            jvp_x(fn, np.zeros(3), np.zeros(1), np.zeros(2))

    def test_polynomial_exact_to_ulps(self):
        """Dual arithmetic carries no truncation error: x^3 - 2x^2."""
        fn = fn2(lambda x, t: ad.sub(ad.mul(ad.mul(x, x), x),
                                     ad.mul(2.0, ad.mul(x, x))), 1, 1, 1)
        for xv in (0.3, 1.7, -2.2):
            got = jvp_x(fn, np.array([xv]), np.zeros(1), np.array([1.0]))[0]
            exact = 3.0 * xv * xv - 4.0 * xv
            # ulps measured at the scale of the terms being combined
            scale = max(abs(3.0 * xv * xv), abs(4.0 * xv))
            assert abs(got - exact) <= 4 * np.spacing(scale)


class TestJvpTheta:
    def test_theta_identity(self):
        fn = fn2(lambda x, t: t, 1, 2, 2)
        w = np.array([0.5, -1.0])
        np.testing.assert_allclose(
            jvp_theta(fn, np.zeros(1), np.zeros(2), w), w)

    def test_no_theta_dependence(self):
        fn = fn2(lambda x, t: x, 2, 2, 2)
        np.testing.assert_allclose(
            jvp_theta(fn, np.ones(2), np.ones(2), np.array([1.0, 1.0])),
            [0.0, 0.0])

    def test_theta_square(self):
        fn = fn2(lambda x, t: ad.mul(t, t), 1, 1, 1)
        out = jvp_theta(fn, np.zeros(1), np.array([3.0]), np.array([2.0]))
        np.testing.assert_allclose(out, [12.0])


class TestVjpX:
    def test_identity(self):
        fn = fn2(lambda x, t: x, 2, 1, 2)
        w = np.array([2.0, 3.0])
        np.testing.assert_allclose(vjp_x(fn, np.zeros(2), np.zeros(1), w), w)

    def test_matrix_transpose_row(self):
        """For fn = Ax, the VJP against e1 reads row one of A."""
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        fn = fn2(lambda x, t: ad.matvec(a, x), 2, 1, 2)
        out = vjp_x(fn, np.zeros(2), np.zeros(1), np.array([1.0, 0.0]))
        np.testing.assert_allclose(out, [1.0, 2.0])

    def test_constant_in_x(self):
        fn = fn2(lambda x, t: np.array([7.0]), 2, 1, 1)
        np.testing.assert_allclose(
            vjp_x(fn, np.zeros(2), np.zeros(1), np.array([1.0])), [0.0, 0.0])

    def test_user_closure_used(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        fn = fn2(lambda x, t: ad.matvec(a, x), 2, 1, 2,
                 vjp=lambda x, t, w: (a.T @ w, np.zeros(1)))
        w = np.array([1.0, 1.0])
        np.testing.assert_allclose(vjp_x(fn, np.zeros(2), np.zeros(1), w),
                                   a.T @ w)


class TestScalarSecondOrder:
    def test_half_norm_squared(self):
        """f = |x|^2/2: gradient x, Hessian identity."""
        f = ScalarFn2(lambda x, t: ad.mul(0.5, ad.dot(x, x)), 2, 1)
        x = np.array([1.0, 2.0])
        np.testing.assert_allclose(grad_x(f, x, np.zeros(1)), x)
        v = np.array([0.3, -0.7])
        np.testing.assert_allclose(hvp_x(f, x, np.zeros(1), v), v)

    def test_cross_scaled_norm(self):
        """f = theta |x|^2 / 2: mixed derivative in theta is x."""
        f = ScalarFn2(lambda x, t: ad.mul(ad.mul(0.5, t[0]), ad.dot(x, x)),
                      2, 1)
        out = cross_jvp(f, np.array([1.0, 2.0]), np.array([0.7]),
                        np.array([1.0]))
        np.testing.assert_allclose(out, [1.0, 2.0])

    def test_diagonal_hessian(self):
        """f = x^T diag(theta) x / 2: Hessian diag(theta)."""
        f = ScalarFn2(lambda x, t: ad.mul(0.5, ad.dot(x, ad.mul(t, x))), 2, 2)
        out = hvp_x(f, np.array([9.0, -4.0]), np.array([2.0, 3.0]),
                    np.array([1.0, 1.0]))
        np.testing.assert_allclose(out, [2.0, 3.0])

    def test_nonquadratic_hessian(self):
        """f = exp(x1 x2): full 2x2 Hessian recovered entrywise."""
        f = ScalarFn2(lambda x, t: ad.exp(ad.mul(x[0], x[1])), 2, 1)
        x = np.array([0.4, -0.3])
        e = np.exp(x[0] * x[1])
        hess = e * np.array([
            [x[1] ** 2, 1.0 + x[0] * x[1]],
            [1.0 + x[0] * x[1], x[0] ** 2],
        ])
        for j, basis in enumerate(np.eye(2)):
            np.testing.assert_allclose(hvp_x(f, x, np.zeros(1), basis),
                                       hess[:, j], atol=1e-12)

    def test_independent_perturbations_not_paired(self):
        """f = <x, theta>: the x- and theta-perturbations meet inside one
        multiply; pairing them would corrupt both products. The Hessian in
        x is zero and the mixed product is the direction itself."""
        f = ScalarFn2(lambda x, t: ad.dot(x, t), 3, 3)
        x = np.array([1.0, -2.0, 0.5])
        t = np.array([0.2, 0.4, -1.0])
        w = np.array([1.0, 2.0, 3.0])
        np.testing.assert_allclose(cross_jvp(f, x, t, w), w, atol=1e-15)
        np.testing.assert_allclose(hvp_x(f, x, t, w), np.zeros(3),
                                   atol=1e-15)

    def test_hvp_symmetry(self):
        """<u, Hv> == <v, Hu> on a nonquadratic objective."""
        f = ScalarFn2(
            lambda x, t: ad.add(ad.power(ad.dot(x, x), 2),
                                ad.exp(ad.dot(x, t))), 4, 4)
        rng = np.random.default_rng(7)
        x = rng.standard_normal(4) * 0.3
        t = rng.standard_normal(4) * 0.3
        for _ in range(20):
            u = rng.standard_normal(4)
            v = rng.standard_normal(4)
            lhs = u @ hvp_x(f, x, t, v)
            rhs = v @ hvp_x(f, x, t, u)
            assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))

    def test_analytic_gradient_closure(self):
        """A dual-capable user gradient is used and validates clean."""
        f = ScalarFn2(lambda x, t: ad.mul(0.5, ad.dot(x, ad.mul(t, x))), 3, 3,
                      grad=lambda x, t: ad.mul(t, x))
        x = np.array([1.0, 2.0, 3.0])
        t = np.array([2.0, 0.5, 1.0])
        np.testing.assert_allclose(grad_x(f, x, t), t * x)
        np.testing.assert_allclose(hvp_x(f, x, t, np.ones(3)), t)
        np.testing.assert_allclose(cross_jvp(f, x, t, np.ones(3)), x)
        check_gradient(f, x, t)


class TestAdjointness:
    def test_random_compositions(self):
        """<w, d1 fn v> == <d1 fn^T w, v> across a small fn grammar."""
        a = np.array([[0.5, 1.0, -0.2], [0.0, 0.3, 0.8]])

        def smooth_clip(x, t):  # active away from the kink at 0.25
            return ad.maximum(x, 0.25)

        fns = [
            fn2(lambda x, t: ad.exp(ad.matvec(a, x)), 3, 1, 2),
            fn2(lambda x, t: ad.mul(x, t), 3, 3, 3),
            fn2(lambda x, t: ad.log(ad.add(ad.exp(x), 1.0)), 3, 1, 3),
            fn2(smooth_clip, 3, 1, 3),
            fn2(lambda x, t: ad.stack([ad.dot(x, x), ad.norm2(x)]), 3, 1, 2),
        ]
        rng = np.random.default_rng(11)
        for fn in fns:
            for _ in range(20):
                x = rng.uniform(0.5, 1.5, size=fn.dim_x)
                t = rng.uniform(0.5, 1.5, size=fn.dim_theta)
                v = rng.standard_normal(fn.dim_x)
                w = rng.standard_normal(fn.dim_out)
                lhs = w @ jvp_x(fn, x, t, v)
                rhs = vjp_x(fn, x, t, w) @ v
                assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))

    def test_jvp_matches_finite_differences(self):
        fn = fn2(lambda x, t: ad.exp(ad.mul(0.3, x)), 3, 1, 3)
        rng = np.random.default_rng(13)
        t = np.zeros(1)
        for _ in range(5):
            x = rng.uniform(-1.0, 1.0, size=3)
            v = rng.standard_normal(3)
            jac = finite_diff_jacobian(lambda z: ad.exp(0.3 * z), x, 1e-6)
            got = jvp_x(fn, x, t, v)
            ref = jac @ v
            assert np.linalg.norm(got - ref) <= 1e-5 * np.linalg.norm(ref)


class TestFiniteDiff:
    def test_identity(self):
        jac = finite_diff_jacobian(lambda x: x, np.array([1.0, 2.0]), 1e-6)
        np.testing.assert_allclose(jac, np.eye(2), atol=1e-9)

    def test_square(self):
        jac = finite_diff_jacobian(lambda x: x * x, np.array([3.0]), 1e-5)
        np.testing.assert_allclose(jac, [[6.0]], atol=1e-8)

    def test_constant(self):
        jac = finite_diff_jacobian(lambda x: np.array([4.0]),
                                   np.array([1.0, 2.0]), 1e-6)
        np.testing.assert_allclose(jac, np.zeros((1, 2)))

    def test_rejects_bad_step(self):
        with pytest.raises(ValueError):
            finite_diff_jacobian(lambda x: x, np.array([1.0]), 0.0)


class TestKinkConvention:
    def test_derivative_zero_at_kink(self):
        """max(x, 1) at x = 1: the tangent is dropped."""
        fn = fn2(lambda x, t: ad.maximum(x, 1.0), 1, 1, 1)
        out = jvp_x(fn, np.array([1.0]), np.zeros(1), np.array([1.0]))
        np.testing.assert_allclose(out, [0.0])

    def test_one_sided_values(self):
        fn = fn2(lambda x, t: ad.maximum(x, 1.0), 1, 1, 1)
        above = jvp_x(fn, np.array([1.5]), np.zeros(1), np.array([1.0]))
        below = jvp_x(fn, np.array([0.5]), np.zeros(1), np.array([1.0]))
        np.testing.assert_allclose(above, [1.0])
        np.testing.assert_allclose(below, [0.0])

    def test_value_preserved_at_tie(self):
        fn = fn2(lambda x, t: ad.maximum(x, 1.0), 1, 1, 1)
        tag = ad.fresh_tag()
        out = fn.eval(DualVector(np.array([1.0]), np.array([1.0]), tag),
                      np.zeros(1))
        np.testing.assert_allclose(ad.deep_primal(out), [1.0])

    def test_near_kink_flagged(self):
        fn = fn2(lambda x, t: ad.maximum(x, 1.0), 1, 1, 1)
        ad.kink_monitor.reset()
        jvp_x(fn, np.array([1.0 + 1e-10]), np.zeros(1), np.array([1.0]))
        assert ad.kink_monitor.count > 0
        ad.kink_monitor.reset()
        jvp_x(fn, np.array([2.0]), np.zeros(1), np.array([1.0]))
        assert ad.kink_monitor.count == 0

    def test_absolute_at_zero(self):
        fn = fn2(lambda x, t: ad.absolute(x), 1, 1, 1)
        out = jvp_x(fn, np.array([0.0]), np.zeros(1), np.array([1.0]))
        np.testing.assert_allclose(out, [0.0])


class TestClosureValidation:
    def test_correct_closures_pass(self):
        a = np.array([[2.0, 1.0], [0.0, 3.0]])
        fn = fn2(lambda x, t: ad.add(ad.matvec(a, x), t), 2, 2, 2,
                 jvp=lambda x, t, vx, vt: a @ vx + vt,
                 vjp=lambda x, t, w: (a.T @ w, w.copy()))
        check_user_closures(fn, np.array([1.0, 2.0]), np.array([0.1, 0.2]))

    def test_wrong_jvp_rejected(self):
        fn = fn2(lambda x, t: ad.mul(x, x), 2, 1, 2,
                 jvp=lambda x, t, vx, vt: 3.0 * x * vx)  # should be 2x
        with pytest.raises(ValueError):
            check_user_closures(fn, np.array([1.0, 2.0]), np.zeros(1))

    def test_wrong_vjp_rejected(self):
        a = np.array([[2.0, 1.0], [0.0, 3.0]])
        fn = fn2(lambda x, t: ad.matvec(a, x), 2, 1, 2,
                 vjp=lambda x, t, w: (a @ w, np.zeros(1)))  # not transposed
        with pytest.raises(ValueError):
            check_user_closures(fn, np.array([1.0, 2.0]), np.zeros(1))

    def test_wrong_gradient_rejected(self):
        f = ScalarFn2(lambda x, t: ad.dot(x, x), 2, 1,
                      grad=lambda x, t: x)  # should be 2x
        with pytest.raises(ValueError):
            check_gradient(f, np.array([1.0, 2.0]), np.zeros(1))


class TestDualVector:
    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            DualVector(np.zeros(3), np.zeros(2), 1)

    def test_operator_sugar(self):
        """Overloads route ndarray-dual arithmetic through dual rules."""
        tag = ad.fresh_tag()
        x = DualVector(np.array([2.0, 4.0]), np.array([1.0, 0.0]), tag)
        c = np.array([3.0, 5.0])
        y = (c * x + c - x / 2.0) ** 2
        p = (c * np.array([2.0, 4.0]) + c - np.array([2.0, 4.0]) / 2.0) ** 2
        np.testing.assert_allclose(ad.deep_primal(y), p)
        # d/dx1 of ((3x+3-x/2)^2) = 2(3x+3-x/2)(2.5) at x=2 -> 2*8*2.5
        np.testing.assert_allclose(ad.deep_primal(ad.tangent_at(y, tag)),
                                   [40.0, 0.0])

    def test_division_reflected(self):
        tag = ad.fresh_tag()
        x = DualVector(np.array([2.0]), np.array([1.0]), tag)
        y = 1.0 / x
        np.testing.assert_allclose(ad.deep_primal(y), [0.5])
        np.testing.assert_allclose(ad.deep_primal(ad.tangent_at(y, tag)),
                                   [-0.25])

    def test_indexing_propagates(self):
        tag = ad.fresh_tag()
        x = DualVector(np.array([1.0, 2.0, 3.0]), np.array([0.1, 0.2, 0.3]),
                       tag)
        np.testing.assert_allclose(ad.deep_primal(x[1:]), [2.0, 3.0])
        np.testing.assert_allclose(
            ad.deep_primal(ad.tangent_at(x[1:], tag)), [0.2, 0.3])

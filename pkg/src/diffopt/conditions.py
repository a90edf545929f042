"""Optimality-condition constructors: each turns an objective (plus
constraints, operators, or cone data) into a root or fixed-point problem
whose implicit derivative is the solution map's Jacobian.

Residual evaluations are written over the dual-number primitives so the
implicit machinery can differentiate them; where a map has a cheap exact
tangent rule (gradient steps, Newton maps, affine constraint systems)
the problems also carry hand-written jvp/vjp closures, which the solvers
prefer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import DiffFn2, DualVector, ScalarFn2, deep_primal
from .implicit import FixedPointProblem, RootProblem
from .linalg import SingularMatrixError, dense_solve
from .operators import BregmanProjOperator, MirrorMap, ProjOperator, \
    ProxOperator

__all__ = [
    "KktPoint",
    "ConstraintFns",
    "QpData",
    "ConeSpec",
    "stationary_condition",
    "gradient_descent_fp",
    "kkt_condition",
    "qp_kkt",
    "qp_solve_dense",
    "proximal_gradient_fp",
    "projected_gradient_fp",
    "mirror_descent_fp",
    "newton_fp",
    "block_prox_fp",
    "conic_residual",
]


# ---------------------------------------------------------------------------
# Domain types


@dataclass
class KktPoint:
    """Primal/dual solution triple (z, nu, lam), packed in that order.

    ``lam`` holds the inequality multipliers and is nonnegative at
    feasible points; ``nu`` the equality multipliers.
    """

    z: np.ndarray
    nu: np.ndarray
    lam: np.ndarray

    def pack(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.z, dtype=np.float64),
                               np.asarray(self.nu, dtype=np.float64),
                               np.asarray(self.lam, dtype=np.float64)])

    @staticmethod
    def unpack(vec, p: int, q: int, r: int) -> "KktPoint":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (p + q + r,):
            raise ValueError(f"packed vector must have length {p + q + r}, "
                             f"got shape {vec.shape}")
        return KktPoint(z=vec[:p].copy(), nu=vec[p:p + q].copy(),
                        lam=vec[p + q:].copy())


@dataclass
class ConstraintFns:
    """Inequality map g (componentwise <= 0) and equality map h (= 0)."""

    g: DiffFn2
    h: DiffFn2


@dataclass
class QpData:
    """Data of the quadratic program
    min 1/2 z^T Q z + c^T z  s.t.  E z = d,  M z <= h.

    Q must be symmetric (exactly) and positive semidefinite; the smallest
    eigenvalue is estimated by shifted power iteration and allowed down
    to -1e-9 for round-off.
    """

    q: np.ndarray
    c: np.ndarray
    e: np.ndarray
    d: np.ndarray
    m: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)
        self.c = np.asarray(self.c, dtype=np.float64)
        self.e = np.asarray(self.e, dtype=np.float64)
        self.d = np.asarray(self.d, dtype=np.float64)
        self.m = np.asarray(self.m, dtype=np.float64)
        self.h = np.asarray(self.h, dtype=np.float64)
        p = self.q.shape[0]
        if self.q.shape != (p, p) or self.c.shape != (p,):
            raise ValueError("Q must be square and c must match it")
        if self.e.shape[1:] != (p,) or self.d.shape != (self.e.shape[0],):
            raise ValueError("E and d have inconsistent shapes")
        if self.m.shape[1:] != (p,) or self.h.shape != (self.m.shape[0],):
            raise ValueError("M and h have inconsistent shapes")
        if not np.array_equal(self.q, self.q.T):
            raise ValueError("Q must be exactly symmetric")
        if _min_eigenvalue(self.q) < -1e-9:
            raise ValueError("Q must be positive semidefinite")

    @property
    def dim_primal(self) -> int:
        return self.q.shape[0]

    @property
    def dim_eq(self) -> int:
        return self.e.shape[0]

    @property
    def dim_ineq(self) -> int:
        return self.m.shape[0]


def _min_eigenvalue(q: np.ndarray) -> float:
    # Power iteration on the shifted negation s*I - Q: its dominant
    # eigenvalue is s - lambda_min(Q) and nonnegative by choice of s.
    p = q.shape[0]
    shift = float(np.max(np.sum(np.abs(q), axis=1))) + 1.0
    v = np.ones(p) + 1e-3 * np.arange(p)
    v /= np.linalg.norm(v)
    for _ in range(200):
        w = shift * v - q @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return shift
        v = w / nw
    return shift - float(v @ (shift * v - q @ v))


_CONE_KINDS = ("zero", "nonneg", "free")


@dataclass
class ConeSpec:
    """Ordered product of cone blocks, each ("zero"|"nonneg"|"free", length)."""

    blocks: List[Tuple[str, int]]

    def __post_init__(self):
        for kind, length in self.blocks:
            if kind not in _CONE_KINDS:
                raise ValueError(f"unknown cone block kind {kind!r}")
            if length <= 0:
                raise ValueError("cone block lengths must be positive")

    @property
    def total(self) -> int:
        return sum(length for _, length in self.blocks)


# ---------------------------------------------------------------------------
# Smooth conditions


def _check_step(eta: float) -> float:
    eta = float(eta)
    if eta <= 0.0:
        raise ValueError("step size must be positive")
    return eta


def _cross_vjp(f: ScalarFn2, x, theta, w) -> np.ndarray:
    # [d2 grad_x f]^T w, one forward pass per theta coordinate.
    out = np.empty(f.dim_theta)
    e = np.zeros(f.dim_theta)
    for j in range(f.dim_theta):
        e[j] = 1.0
        out[j] = float(ad.cross_jvp(f, x, theta, e) @ w)
        e[j] = 0.0
    return out


def stationary_condition(f: ScalarFn2) -> RootProblem:
    """Root problem whose residual is the negated gradient of f in x.

    The negation makes the residual's sensitivity operator the Hessian
    itself (symmetric positive definite for strongly convex f), so the
    conjugate-gradient route applies; roots and Jacobians are unchanged
    by the sign.
    """

    def eval_(x, theta):
        return ad.mul(-1.0, ad.grad_value(f, x, theta))

    def jvp(x, theta, vx, vtheta):
        return -(ad.hvp_x(f, x, theta, vx) + ad.cross_jvp(f, x, theta,
                                                          vtheta))

    def vjp(x, theta, w):
        return (-ad.hvp_x(f, x, theta, w), -_cross_vjp(f, x, theta, w))

    f_map = DiffFn2(eval=eval_, dim_x=f.dim_x, dim_theta=f.dim_theta,
                    dim_out=f.dim_x, jvp=jvp, vjp=vjp)
    return RootProblem(f_map=f_map, symmetric=True)


def gradient_descent_fp(f: ScalarFn2, eta: float) -> FixedPointProblem:
    """Fixed point of T(x, theta) = x - eta grad_x f(x, theta).

    The step size scales both sides of the implicit linear system, so
    the Jacobian estimate is independent of eta.
    """
    eta = _check_step(eta)

    def eval_(x, theta):
        return ad.sub(x, ad.mul(eta, ad.grad_value(f, x, theta)))

    def jvp(x, theta, vx, vtheta):
        return vx - eta * (ad.hvp_x(f, x, theta, vx)
                           + ad.cross_jvp(f, x, theta, vtheta))

    def vjp(x, theta, w):
        return (w - eta * ad.hvp_x(f, x, theta, w),
                -eta * _cross_vjp(f, x, theta, w))

    t_map = DiffFn2(eval=eval_, dim_x=f.dim_x, dim_theta=f.dim_theta,
                    dim_out=f.dim_x, jvp=jvp, vjp=vjp)
    return FixedPointProblem(t_map=t_map, symmetric=True)


# ---------------------------------------------------------------------------
# KKT systems


def kkt_condition(f: ScalarFn2, cons: ConstraintFns) -> RootProblem:
    """Root problem over the packed point (z, nu, lam) stacking
    stationarity, equality feasibility, and complementary slackness:

        grad_z f + [d1 g]^T lam + [d1 h]^T nu ; h(z, theta) ; lam * g(z, theta)

    The multiplier terms are transpose products, assembled without ever
    forming the constraint Jacobians.
    """
    p, n_theta = f.dim_x, f.dim_theta
    r, q = cons.g.dim_out, cons.h.dim_out
    if cons.g.dim_x != p or cons.h.dim_x != p:
        raise ValueError("constraint maps must share the primal dimension "
                         "of f")
    if cons.g.dim_theta != n_theta or cons.h.dim_theta != n_theta:
        raise ValueError("constraint maps must share the parameter "
                         "dimension of f")
    n = p + q + r

    def eval_(packed, theta):
        z = packed[:p]
        stat = ad.grad_value(f, z, theta)
        if r:
            stat = ad.add(stat, ad.vjp_x_value(cons.g, z, theta,
                                               packed[p + q:]))
        if q:
            stat = ad.add(stat, ad.vjp_x_value(cons.h, z, theta,
                                               packed[p:p + q]))
        rows = [stat]
        if q:
            rows.append(cons.h.eval(z, theta))
        if r:
            rows.append(ad.mul(packed[p + q:], cons.g.eval(z, theta)))
        return ad.concat(rows)

    f_map = DiffFn2(eval=eval_, dim_x=n, dim_theta=n_theta, dim_out=n)
    return RootProblem(f_map=f_map, symmetric=False)


def qp_kkt(qp: QpData) -> RootProblem:
    """KKT root problem of the quadratic program, parameterized by the
    stacked right-hand vectors theta = (c, d, h); the matrices Q, E, M
    are baked in as constants."""
    p, q_dim, r_dim = qp.dim_primal, qp.dim_eq, qp.dim_ineq
    n_theta = p + q_dim + r_dim
    q_mat, e_mat, m_mat = qp.q, qp.e, qp.m

    f = ScalarFn2(
        eval=lambda z, th: ad.add(ad.mul(0.5, ad.dot(z, ad.matvec(q_mat, z))),
                                  ad.dot(th[:p], z)),
        dim_x=p, dim_theta=n_theta,
        grad=lambda z, th: ad.add(ad.matvec(q_mat, z), th[:p]))

    g = DiffFn2(
        eval=lambda z, th: ad.sub(ad.matvec(m_mat, z), th[p + q_dim:]),
        dim_x=p, dim_theta=n_theta, dim_out=r_dim,
        jvp=lambda z, th, vz, vth: m_mat @ vz - vth[p + q_dim:],
        vjp=lambda z, th, w: (m_mat.T @ w,
                              np.concatenate([np.zeros(p + q_dim), -w])))
    h = DiffFn2(
        eval=lambda z, th: ad.sub(ad.matvec(e_mat, z), th[p:p + q_dim]),
        dim_x=p, dim_theta=n_theta, dim_out=q_dim,
        jvp=lambda z, th, vz, vth: e_mat @ vz - vth[p:p + q_dim],
        vjp=lambda z, th, w: (e_mat.T @ w,
                              np.concatenate([np.zeros(p), -w,
                                              np.zeros(r_dim)])))
    return kkt_condition(f, ConstraintFns(g=g, h=h))


def _saddle_solve(qp: QpData, rhs_top: np.ndarray, active: Sequence[int],
                  rhs_eq: np.ndarray = None):
    # Solve the equality-plus-working-set KKT system
    # [[Q, E^T, M_W^T], [E, 0, 0], [M_W, 0, 0]] (z, nu, lam_W) = rhs.
    p, q_dim = qp.dim_primal, qp.dim_eq
    m_act = qp.m[list(active), :] if active else np.zeros((0, p))
    k = len(active)
    top = np.hstack([qp.q, qp.e.T, m_act.T])
    mid = np.hstack([qp.e, np.zeros((q_dim, q_dim)), np.zeros((q_dim, k))])
    bot = np.hstack([m_act, np.zeros((k, q_dim)), np.zeros((k, k))])
    mat = np.vstack([top, mid, bot])
    rhs = np.concatenate([rhs_top, qp.d if rhs_eq is None else rhs_eq,
                          qp.h[list(active)]])
    sol = dense_solve(np.asarray(mat, order="F"), rhs)
    return sol[:p], sol[p:p + q_dim], sol[p + q_dim:]


def qp_solve_dense(qp: QpData) -> KktPoint:
    """Desk-scale QP solver used by the tests.

    The equality-constrained case is one saddle linear solve. With
    inequalities, a projected-gradient pass in the multiplier space
    warm-starts the active set, then active-set refinement repeatedly
    solves the exact working-set system, dropping negative multipliers
    and adding violated constraints one at a time; after 5r sweeps
    without settling it gives up. Constraints within 1e-10 of the
    boundary are treated as active.
    """
    p, r_dim = qp.dim_primal, qp.dim_ineq
    if r_dim == 0:
        z, nu, _ = _saddle_solve(qp, -qp.c, [])
        return KktPoint(z=z, nu=nu, lam=np.zeros(0))

    lam = np.zeros(r_dim)
    try:
        step = 1.0 / max(_dual_curvature(qp), 1e-8)
        for _ in range(200):
            z, _, _ = _saddle_solve(qp, -qp.c - qp.m.T @ lam, [])
            lam_next = np.maximum(0.0, lam + step * (qp.m @ z - qp.h))
            if not np.all(np.isfinite(lam_next)):
                break
            lam = lam_next
        z, _, _ = _saddle_solve(qp, -qp.c - qp.m.T @ lam, [])
        slack = qp.m @ z - qp.h
        active = sorted(int(i) for i in
                        set(np.nonzero(lam > 1e-8)[0])
                        | set(np.nonzero(np.abs(slack) <= 1e-10)[0]))
    except SingularMatrixError:
        active = []

    max_sweeps = 5 * r_dim
    for _ in range(max_sweeps):
        z, nu, lam_w = _saddle_solve(qp, -qp.c, active)
        if lam_w.size and float(np.min(lam_w)) < -1e-10:
            del active[int(np.argmin(lam_w))]
            continue
        slack = qp.m @ z - qp.h
        slack[active] = 0.0
        if float(np.max(slack, initial=0.0)) > 1e-10:
            worst = int(np.argmax(slack))
            active = sorted(active + [worst])
            continue
        lam = np.zeros(r_dim)
        lam[active] = np.maximum(lam_w, 0.0)
        return KktPoint(z=z, nu=nu, lam=lam)
    raise RuntimeError("active-set refinement did not settle within "
                       f"{max_sweeps} sweeps")


def _dual_curvature(qp: QpData) -> float:
    # Largest eigenvalue of M S M^T with S the homogeneous primal saddle
    # solve; it bounds the multiplier ascent curvature.
    r_dim = qp.dim_ineq
    zero_eq = np.zeros(qp.dim_eq)
    cols = np.empty((qp.dim_primal, r_dim))
    for j in range(r_dim):
        cols[:, j], _, _ = _saddle_solve(qp, qp.m[j, :], [], rhs_eq=zero_eq)
    hess = qp.m @ cols
    return float(np.max(np.linalg.eigvalsh(0.5 * (hess + hess.T)),
                        initial=0.0))


# ---------------------------------------------------------------------------
# Proximal / projected / mirror / block fixed points


def proximal_gradient_fp(f: ScalarFn2, prox: ProxOperator,
                         eta: float) -> FixedPointProblem:
    """Fixed point of T(x, theta) = prox(x - eta grad_x f(x, theta), theta)."""
    eta = _check_step(eta)

    def eval_(x, theta):
        return prox.evaluate(
            ad.sub(x, ad.mul(eta, ad.grad_value(f, x, theta))), theta)

    t_map = DiffFn2(eval=eval_, dim_x=f.dim_x, dim_theta=f.dim_theta,
                    dim_out=f.dim_x)
    return FixedPointProblem(t_map=t_map, symmetric=False)


def projected_gradient_fp(f: ScalarFn2, proj: ProjOperator,
                          eta: float) -> FixedPointProblem:
    """Fixed point of T(x, theta) = proj(x - eta grad_x f(x, theta), theta)."""
    eta = _check_step(eta)

    def eval_(x, theta):
        return proj.evaluate(
            ad.sub(x, ad.mul(eta, ad.grad_value(f, x, theta))), theta)

    t_map = DiffFn2(eval=eval_, dim_x=f.dim_x, dim_theta=f.dim_theta,
                    dim_out=f.dim_x)
    return FixedPointProblem(t_map=t_map, symmetric=False)


def mirror_descent_fp(f: ScalarFn2, mirror: MirrorMap,
                      bproj: BregmanProjOperator,
                      eta: float) -> FixedPointProblem:
    """Fixed point of the mirror-descent update: map x into mirror
    coordinates, take the gradient step there, and Bregman-project back.

    Queries must lie strictly inside the mirror map's domain (all
    positive under the entropy map), else the map raises.
    """
    eta = _check_step(eta)

    def eval_(x, theta):
        shifted = ad.sub(mirror.forward(x),
                         ad.mul(eta, ad.grad_value(f, x, theta)))
        return bproj.evaluate(shifted, theta)

    t_map = DiffFn2(eval=eval_, dim_x=f.dim_x, dim_theta=f.dim_theta,
                    dim_out=f.dim_x)
    return FixedPointProblem(t_map=t_map, symmetric=False)


def newton_fp(g_root: DiffFn2, eta: float) -> FixedPointProblem:
    """Fixed point of the damped Newton map
    T(x, theta) = x - eta [d1 g(x, theta)]^{-1} g(x, theta).

    Each evaluation materializes d1 g densely at the query's primal
    point and solves against it, so a singular partial Jacobian raises.
    The attached tangent rules are the ones valid at a root (where
    g = 0): the residual sensitivity is eta I and the parameter side is
    -eta [d1 g]^{-1} d2 g, which is what implicit differentiation needs;
    away from a root they deliberately drop the derivative of the
    factorized matrix.
    """
    eta = _check_step(eta)
    p, n_theta = g_root.dim_x, g_root.dim_theta

    def partial_x(x, theta) -> np.ndarray:
        xp = np.asarray(deep_primal(x), dtype=np.float64)
        tp = np.asarray(deep_primal(theta), dtype=np.float64)
        cols = np.empty((p, p), order="F")
        e = np.zeros(p)
        for j in range(p):
            e[j] = 1.0
            cols[:, j] = ad.jvp_x(g_root, xp, tp, e)
            e[j] = 0.0
        return cols

    def solve_through(mat: np.ndarray, v):
        if isinstance(v, DualVector):
            return DualVector(solve_through(mat, v.primal),
                              solve_through(mat, v.tangent), v.tag)
        return dense_solve(mat, np.asarray(v, dtype=np.float64))

    def eval_(x, theta):
        jac = partial_x(x, theta)
        val = g_root.eval(x, theta)
        return ad.sub(x, ad.mul(eta, solve_through(jac, val)))

    def jvp(x, theta, vx, vtheta):
        jac = partial_x(x, theta)
        push = ad.jvp_theta(g_root, x, theta, vtheta)
        return (1.0 - eta) * np.asarray(vx) - eta * dense_solve(jac, push)

    def vjp(x, theta, w):
        jac = partial_x(x, theta)
        u = dense_solve(np.asarray(jac.T, order="F"),
                        np.asarray(w, dtype=np.float64))
        if g_root.vjp is not None:
            w_theta = -eta * np.asarray(g_root.vjp(x, theta, u)[1])
        else:
            w_theta = np.empty(n_theta)
            e = np.zeros(n_theta)
            for j in range(n_theta):
                e[j] = 1.0
                w_theta[j] = -eta * float(
                    ad.jvp_theta(g_root, x, theta, e) @ u)
                e[j] = 0.0
        return (1.0 - eta) * np.asarray(w), w_theta

    t_map = DiffFn2(eval=eval_, dim_x=p, dim_theta=n_theta, dim_out=p,
                    jvp=jvp, vjp=vjp)
    return FixedPointProblem(t_map=t_map, symmetric=True)


def block_prox_fp(f: ScalarFn2,
                  blocks: Sequence[Tuple[Tuple[int, int], ProxOperator,
                                         float]]) -> FixedPointProblem:
    """Blockwise proximal-gradient fixed point: every block takes its own
    step size and prox, all evaluated at the same incoming point.

    With a uniform step and a separable prox this equals
    proximal_gradient_fp.
    """
    expect = 0
    for (start, stop), _, eta_i in blocks:
        if start != expect or stop <= start:
            raise ValueError("blocks must be contiguous nonempty ranges "
                             "partitioning the vector")
        _check_step(eta_i)
        expect = stop
    if expect != f.dim_x:
        raise ValueError(f"blocks cover [0, {expect}) but the problem has "
                         f"dimension {f.dim_x}")

    def eval_(x, theta):
        grad = ad.grad_value(f, x, theta)
        parts = []
        for (start, stop), prox, eta_i in blocks:
            stepped = ad.sub(x[start:stop],
                             ad.mul(eta_i, grad[start:stop]))
            parts.append(prox.evaluate(stepped, theta))
        return ad.concat(parts)

    t_map = DiffFn2(eval=eval_, dim_x=f.dim_x, dim_theta=f.dim_theta,
                    dim_out=f.dim_x)
    return FixedPointProblem(t_map=t_map, symmetric=False)


# ---------------------------------------------------------------------------
# Conic residual


def conic_residual(cones: ConeSpec) -> RootProblem:
    """Residual map of the homogeneous self-dual embedding,
    F(x, theta) = ((Theta - I) Pi + I) x, with theta the flattened
    N x N skew-symmetric data matrix and Pi the blockwise cone
    projection."""
    n = cones.total

    def project(x):
        parts = []
        offset = 0
        for kind, length in cones.blocks:
            blk = x[offset:offset + length]
            if kind == "zero":
                parts.append(ad.mul(blk, 0.0))
            elif kind == "nonneg":
                parts.append(ad.maximum(blk, 0.0))
            else:
                parts.append(blk)
            offset += length
        return ad.concat(parts)

    def eval_(x, theta):
        mat_p = np.asarray(deep_primal(theta),
                           dtype=np.float64).reshape(n, n)
        if float(np.max(np.abs(mat_p + mat_p.T), initial=0.0)) > 1e-9:
            raise ValueError("theta must flatten from a skew-symmetric "
                             "matrix")
        mat = ad.reshape(theta, (n, n))
        pix = project(x)
        return ad.add(ad.sub(x, pix), ad.matvec(mat, pix))

    f_map = DiffFn2(eval=eval_, dim_x=n, dim_theta=n * n, dim_out=n)
    return RootProblem(f_map=f_map, symmetric=False)

"""Implicit differentiation of optimality conditions.

Given a mapping F(x, theta) whose root x*(theta) is the solution of an
optimization problem, the solution Jacobian satisfies the linear system

    A J = B,   A = -d1 F(x*, theta),   B = d2 F(x*, theta),

so Jacobian-vector products, transposed products, and hypergradients all
reduce to matrix-free linear solves against A. Fixed-point mappings T
are handled through the residual F = T - x, whose partials are I - d1 T
and d2 T. Evaluated at an approximate solution, the same solves give the
Jacobian estimate whose distance to the true Jacobian is bounded by the
error-bound module.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import DiffFn2, jvp_theta, jvp_x, vjp_x
from .linalg import (
    LinearMap,
    SolveReport,
    bicgstab_solve,
    cg_solve,
    gmres_solve,
    normal_cg_solve,
)

__all__ = [
    "RootProblem",
    "FixedPointProblem",
    "ImplicitConfig",
    "JacobianEstimate",
    "SolverKind",
    "ImplicitSolveError",
    "to_root",
    "a_operator",
    "b_operator",
    "root_jvp",
    "root_vjp",
    "solve_adjoint",
    "jacobian_estimate",
    "hypergradient",
]


@dataclass
class RootProblem:
    """An optimality mapping F whose root is the solution to differentiate.

    ``symmetric`` declares that A = -d1 F is symmetric (true for
    stationarity and gradient-descent conditions), which selects CG as
    the default linear solver.
    """

    f_map: DiffFn2
    symmetric: bool = False

    def __post_init__(self):
        if self.f_map.dim_out != self.f_map.dim_x:
            raise ValueError("optimality mapping must be square "
                             f"(dim_out={self.f_map.dim_out}, "
                             f"dim_x={self.f_map.dim_x})")

    @property
    def dim_x(self) -> int:
        return self.f_map.dim_x

    @property
    def dim_theta(self) -> int:
        return self.f_map.dim_theta


@dataclass
class FixedPointProblem:
    """A fixed-point mapping T with solution x* = T(x*, theta)."""

    t_map: DiffFn2
    symmetric: bool = False

    def __post_init__(self):
        if self.t_map.dim_out != self.t_map.dim_x:
            raise ValueError("fixed-point mapping must be square")


class SolverKind(Enum):
    CG = "cg"
    GMRES = "gmres"
    BICGSTAB = "bicgstab"
    NORMAL_CG = "normal_cg"


@dataclass
class ImplicitConfig:
    """Linear-solver policy for the implicit solves.

    ``linear_solver=None`` selects automatically: CG for problems that
    declare a symmetric A, BiCGSTAB otherwise. ``fallback_to_least_squares``
    re-solves through the normal equations when the primary solver does
    not converge (the flag shows in the report); non-convergence of a
    near-singular A has no cheaper detector than the solver itself.
    """

    linear_solver: Optional[SolverKind] = None
    tol: float = 1e-10
    max_iter: Optional[int] = None
    fallback_to_least_squares: bool = True

    def __post_init__(self):
        if self.tol <= 0.0:
            raise ValueError("tol must be positive")


@dataclass
class JacobianEstimate:
    """Solution Jacobian estimate with one solve report per column."""

    matrix: np.ndarray
    reports: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return all(r.converged for r in self.reports)


class ImplicitSolveError(RuntimeError):
    """Raised when both the primary and fallback linear solves fail."""

    def __init__(self, message: str, report: SolveReport):
        super().__init__(message)
        self.report = report


def to_root(fp: FixedPointProblem) -> RootProblem:
    """Rewrite a fixed point of T as a root of F(x, theta) = T(x, theta) - x.

    The chain rule gives d1 F = d1 T - I and d2 F = d2 T, so A = I - d1 T;
    user jvp/vjp closures on T are adapted rather than discarded.
    """
    t = fp.t_map
    jvp = None
    vjp = None
    if t.jvp is not None:
        def jvp(x, theta, vx, vtheta, _t=t.jvp):
            return np.asarray(_t(x, theta, vx, vtheta)) - np.asarray(vx)
    if t.vjp is not None:
        def vjp(x, theta, w, _t=t.vjp):
            wx, wtheta = _t(x, theta, w)
            return np.asarray(wx) - np.asarray(w), wtheta
    f = DiffFn2(
        eval=lambda x, theta: ad.sub(t.eval(x, theta), x),
        dim_x=t.dim_x, dim_theta=t.dim_theta, dim_out=t.dim_out,
        jvp=jvp, vjp=vjp,
    )
    return RootProblem(f_map=f, symmetric=fp.symmetric)


def a_operator(rp: RootProblem, x, theta) -> LinearMap:
    """The operator A = -d1 F(x, theta) as a matrix-free LinearMap.

    The transpose comes from a user vjp closure when the mapping has
    one; otherwise it is synthesized by cached column materialization,
    which equals the transposed product assembled from dim_x forward
    passes.
    """
    fm = rp.f_map
    apply_transpose = None
    if fm.vjp is not None:
        apply_transpose = lambda w: -vjp_x(fm, x, theta, w)
    return LinearMap(fm.dim_out, fm.dim_x,
                     lambda v: -jvp_x(fm, x, theta, v),
                     apply_transpose)


def b_operator(rp: RootProblem, x, theta) -> LinearMap:
    """The operator B = d2 F(x, theta) as a matrix-free LinearMap."""
    fm = rp.f_map
    apply_transpose = None
    if fm.vjp is not None:
        apply_transpose = lambda v: np.asarray(fm.vjp(x, theta, v)[1],
                                               dtype=np.float64)
    return LinearMap(fm.dim_out, fm.dim_theta,
                     lambda w: jvp_theta(fm, x, theta, w),
                     apply_transpose)


def _run_solver(kind: SolverKind, op: LinearMap, rhs, cfg: ImplicitConfig):
    if kind is SolverKind.CG:
        return cg_solve(op, rhs, tol=cfg.tol, max_iter=cfg.max_iter)
    if kind is SolverKind.GMRES:
        return gmres_solve(op, rhs, tol=cfg.tol, max_iter=cfg.max_iter)
    if kind is SolverKind.BICGSTAB:
        return bicgstab_solve(op, rhs, tol=cfg.tol, max_iter=cfg.max_iter)
    return normal_cg_solve(op, rhs, tol=cfg.tol, max_iter=cfg.max_iter)


def _solve_with_fallback(op: LinearMap, rhs, rp: RootProblem,
                         cfg: Optional[ImplicitConfig]):
    """Primary solve per config, then the least-squares rescue."""
    if cfg is None:
        cfg = ImplicitConfig()
    kind = cfg.linear_solver
    if kind is None:
        kind = SolverKind.CG if rp.symmetric else SolverKind.BICGSTAB
    x, report = _run_solver(kind, op, rhs, cfg)
    if report.converged:
        return x, report
    if cfg.fallback_to_least_squares and kind is not SolverKind.NORMAL_CG:
        x, report = normal_cg_solve(op, rhs, tol=cfg.tol,
                                    max_iter=cfg.max_iter)
        if report.converged:
            return x, report
    raise ImplicitSolveError(
        f"implicit linear solve failed (residual "
        f"{report.final_residual_norm:.3e} after {report.iterations} "
        f"iterations)", report)


def root_jvp(rp: RootProblem, x_hat, theta, w,
             cfg: Optional[ImplicitConfig] = None):
    """Jacobian-vector product J w, from the solve A (J w) = B w.

    Returns the product and the report of the linear solve (including
    whether the least-squares fallback produced it).
    """
    a = a_operator(rp, x_hat, theta)
    rhs = jvp_theta(rp.f_map, x_hat, theta, w)
    return _solve_with_fallback(a, rhs, rp, cfg)


def solve_adjoint(rp: RootProblem, x_hat, theta, v,
                  cfg: Optional[ImplicitConfig] = None):
    """Solve A^T u = v and return (u, report).

    The adjoint solution is what a transposed product J^T v = B^T u
    consumes; it depends only on A, so one u can be reused against any
    number of different B operators without re-solving.
    """
    a = a_operator(rp, x_hat, theta)
    at = LinearMap(a.dim_in, a.dim_out, a.apply_transpose, a.apply)
    return _solve_with_fallback(at, np.asarray(v, dtype=np.float64), rp, cfg)


def root_vjp(rp: RootProblem, x_hat, theta, v,
             cfg: Optional[ImplicitConfig] = None):
    """Transposed product J^T v = B^T u where A^T u = v."""
    u, report = solve_adjoint(rp, x_hat, theta, v, cfg)
    b = b_operator(rp, x_hat, theta)
    return b.apply_transpose(u), report


def jacobian_estimate(rp: RootProblem, x_hat, theta,
                      cfg: Optional[ImplicitConfig] = None) -> JacobianEstimate:
    """The full Jacobian estimate J(x_hat, theta) solving A J = B.

    Column j comes from an independent matrix-free solve against the
    j-th column of B; at an exact root the estimate is the exact
    solution Jacobian.
    """
    n = rp.dim_theta
    matrix = np.empty((rp.dim_x, n), order="F")
    reports = []
    e = np.zeros(n)
    for j in range(n):
        e[j] = 1.0
        col, report = root_jvp(rp, x_hat, theta, e, cfg)
        e[j] = 0.0
        matrix[:, j] = col
        reports.append(report)
    return JacobianEstimate(matrix=matrix, reports=reports)


def hypergradient(rp: RootProblem, x_hat, theta, outer_grad,
                  cfg: Optional[ImplicitConfig] = None) -> np.ndarray:
    """Gradient of an outer loss L(x*(theta)) in theta: J^T grad L.

    ``outer_grad`` is the gradient of L at x_hat; one adjoint solve
    yields the full hypergradient.
    """
    out, _ = root_vjp(rp, x_hat, theta, outer_grad, cfg)
    return out

"""Dense vectors and matrices, matrix-free linear maps, and Krylov solvers.

Everything downstream runs on the primitives in this module: validated
double-precision arrays, a ``LinearMap`` wrapper around forward/transpose
apply closures, and the four iterative solvers (CG, GMRES, BiCGSTAB, and
CG on the normal equations) plus a direct dense solver for small systems.
All solvers are matrix-free: they touch the operator only through
``apply`` and ``apply_transpose``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.linalg

__all__ = [
    "DenseVector",
    "DenseMatrix",
    "LinearMap",
    "SolveReport",
    "SingularMatrixError",
    "dense_vector",
    "dense_matrix",
    "materialize",
    "cg_solve",
    "gmres_solve",
    "bicgstab_solve",
    "normal_cg_solve",
    "dense_solve",
]

# Type aliases: vectors are 1-d float64 arrays, matrices are 2-d float64
# arrays in column-major order. The validating constructors below are the
# entry points for user-supplied data; library-internal results are trusted.
DenseVector = np.ndarray
DenseMatrix = np.ndarray


class SingularMatrixError(ValueError):
    """Raised when a direct solve meets a numerically singular matrix."""


def dense_vector(values) -> DenseVector:
    """Build a validated 1-d float64 vector from user input.

    Parameters
    ----------
    values : array-like
        One-dimensional collection of real numbers.

    Returns
    -------
    numpy.ndarray
        A fresh float64 copy.

    Raises
    ------
    ValueError
        If the input is not 1-d, is empty, or contains NaN/Inf.
    """
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"expected a 1-d vector, got ndim={arr.ndim}")
    if arr.size == 0:
        raise ValueError("vector length must be positive")
    if not np.all(np.isfinite(arr)):
        raise ValueError("vector entries must be finite")
    return arr


def dense_matrix(values) -> DenseMatrix:
    """Build a validated 2-d float64 matrix (column-major) from user input.

    Raises
    ------
    ValueError
        If the input is not 2-d, is empty, or contains NaN/Inf.
    """
    arr = np.array(values, dtype=np.float64, order="F")
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-d matrix, got ndim={arr.ndim}")
    if arr.size == 0:
        raise ValueError("matrix dimensions must be positive")
    if not np.all(np.isfinite(arr)):
        raise ValueError("matrix entries must be finite")
    return arr


class LinearMap:
    """Matrix-free linear operator with forward and transpose application.

    Parameters
    ----------
    dim_out, dim_in : int
        Output and input dimensions of the forward map.
    apply : callable
        Closure mapping a length-``dim_in`` vector to length ``dim_out``.
    apply_transpose : callable, optional
        Closure for the adjoint map. When omitted, it is synthesized by
        materializing the operator column by column (``dim_in`` forward
        applies, cached), which is valid at the problem sizes this
        library targets.
    """

    def __init__(
        self,
        dim_out: int,
        dim_in: int,
        apply: Callable[[np.ndarray], np.ndarray],
        apply_transpose: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    ):
        if dim_out <= 0 or dim_in <= 0:
            raise ValueError("operator dimensions must be positive")
        self.dim_out = int(dim_out)
        self.dim_in = int(dim_in)
        self.apply = apply
        self._columns: Optional[np.ndarray] = None
        if apply_transpose is not None:
            self.apply_transpose = apply_transpose
        else:
            self.apply_transpose = self._synthesized_transpose

    @classmethod
    def from_matrix(cls, a: DenseMatrix) -> "LinearMap":
        """Wrap a dense matrix as a LinearMap."""
        a = np.asarray(a, dtype=np.float64)
        return cls(a.shape[0], a.shape[1], lambda v: a @ v, lambda w: a.T @ w)

    @classmethod
    def identity(cls, dim: int) -> "LinearMap":
        """The identity operator on R^dim."""
        return cls(dim, dim, lambda v: np.array(v, dtype=np.float64, copy=True),
                   lambda w: np.array(w, dtype=np.float64, copy=True))

    def _synthesized_transpose(self, w: np.ndarray) -> np.ndarray:
        if self._columns is None:
            self._columns = materialize(self)
        return self._columns.T @ w


def materialize(op: LinearMap) -> DenseMatrix:
    """Assemble the dense matrix of ``op`` via ``dim_in`` forward applies."""
    cols = np.empty((op.dim_out, op.dim_in), order="F")
    e = np.zeros(op.dim_in)
    for j in range(op.dim_in):
        e[j] = 1.0
        cols[:, j] = op.apply(e)
        e[j] = 0.0
    return cols


@dataclass
class SolveReport:
    """Outcome record for one iterative linear solve.

    Attributes
    ----------
    iterations : int
        Operator applications consumed (counting matvec-bearing steps).
    final_residual_norm : float
        Euclidean norm of the residual at exit.
    converged : bool
        Whether the residual met ``tol * max(1, ||rhs||)``.
    used_least_squares_fallback : bool
        True when the solution came from the normal-equations route.
    """

    iterations: int
    final_residual_norm: float
    converged: bool
    used_least_squares_fallback: bool = False


def _resolve_defaults(n: int, tol: Optional[float], max_iter: Optional[int]):
    if tol is None:
        tol = 1e-10
    if max_iter is None:
        max_iter = 10 * n
    return tol, max_iter


def cg_solve(
    op: LinearMap,
    rhs: DenseVector,
    tol: Optional[float] = None,
    max_iter: Optional[int] = None,
) -> tuple[DenseVector, SolveReport]:
    """Conjugate gradient for symmetric positive (semi-)definite operators.

    Symmetry and positivity are the caller's responsibility; they are not
    checked. Non-convergence within ``max_iter``, and breakdown on a zero
    curvature direction, return with ``converged=False`` rather than
    raising, so callers can fall back to ``normal_cg_solve``.

    Parameters
    ----------
    op : LinearMap
        Square SPD operator.
    rhs : array
        Right-hand side.
    tol : float, optional
        Relative residual tolerance (default 1e-10); the stopping test is
        ``||op(x) - rhs|| <= tol * max(1, ||rhs||)``.
    max_iter : int, optional
        Iteration cap (default ``10 * dim``).

    Returns
    -------
    (x, report) : (array, SolveReport)
    """
    n = op.dim_in
    tol, max_iter = _resolve_defaults(n, tol, max_iter)
    b = np.asarray(rhs, dtype=np.float64)
    threshold = tol * max(1.0, float(np.linalg.norm(b)))

    x = np.zeros(n)
    r = b.copy()
    res = float(np.linalg.norm(r))
    if res <= threshold:
        return x, SolveReport(0, res, True)

    p = r.copy()
    rs = float(r @ r)
    for k in range(1, max_iter + 1):
        ap = op.apply(p)
        curv = float(p @ ap)
        # Zero/negative curvature means the operator is not SPD along p.
        if curv <= 1e-14 * float(p @ p):
            return x, SolveReport(k, res, False)
        alpha = rs / curv
        x += alpha * p
        r -= alpha * ap
        res = float(np.linalg.norm(r))
        if res <= threshold:
            return x, SolveReport(k, res, True)
        rs_new = float(r @ r)
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x, SolveReport(max_iter, res, False)


def gmres_solve(
    op: LinearMap,
    rhs: DenseVector,
    tol: Optional[float] = None,
    max_iter: Optional[int] = None,
    restart: Optional[int] = None,
) -> tuple[DenseVector, SolveReport]:
    """Restarted GMRES for general square operators.

    Arnoldi with modified Gram-Schmidt and Givens rotations; restarts
    every ``restart`` inner steps (default ``min(30, dim)``). Stagnation
    over a full restart cycle exits with ``converged=False``.

    Parameters and return value as in ``cg_solve``; residual contract is
    ``||op(x) - rhs|| <= tol * max(1, ||rhs||)``.
    """
    n = op.dim_in
    tol, max_iter = _resolve_defaults(n, tol, max_iter)
    if restart is None:
        restart = min(30, n)
    b = np.asarray(rhs, dtype=np.float64)
    threshold = tol * max(1.0, float(np.linalg.norm(b)))

    x = np.zeros(n)
    total = 0
    prev_cycle_res = np.inf
    res = float(np.linalg.norm(b))
    while total < max_iter:
        r = b - op.apply(x)
        beta = float(np.linalg.norm(r))
        if beta <= threshold:
            return x, SolveReport(total, beta, True)
        if beta >= prev_cycle_res:  # no progress over a whole cycle
            return x, SolveReport(total, beta, False)
        prev_cycle_res = beta

        m = min(restart, max_iter - total)
        V = np.zeros((n, m + 1))
        H = np.zeros((m + 1, m))
        cs = np.zeros(m)
        sn = np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        V[:, 0] = r / beta

        j_used = 0
        exact = False
        for j in range(m):
            w = op.apply(V[:, j])
            total += 1
            for i in range(j + 1):
                H[i, j] = float(V[:, i] @ w)
                w -= H[i, j] * V[:, i]
            H[j + 1, j] = float(np.linalg.norm(w))
            if H[j + 1, j] > 1e-300:
                V[:, j + 1] = w / H[j + 1, j]
            else:
                exact = True  # happy breakdown: Krylov space is invariant
            # Apply accumulated rotations, then a new one to re-triangularize.
            for i in range(j):
                hi = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
                H[i + 1, j] = -sn[i] * H[i, j] + cs[i] * H[i + 1, j]
                H[i, j] = hi
            denom = np.hypot(H[j, j], H[j + 1, j])
            cs[j] = H[j, j] / denom
            sn[j] = H[j + 1, j] / denom
            H[j, j] = denom
            H[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]
            j_used = j + 1
            if abs(g[j + 1]) <= threshold or exact:
                break

        y = scipy.linalg.solve_triangular(H[:j_used, :j_used], g[:j_used])
        x = x + V[:, :j_used] @ y
        res = float(np.linalg.norm(b - op.apply(x)))
        if res <= threshold:
            return x, SolveReport(total, res, True)
    return x, SolveReport(total, res, False)


def bicgstab_solve(
    op: LinearMap,
    rhs: DenseVector,
    tol: Optional[float] = None,
    max_iter: Optional[int] = None,
) -> tuple[DenseVector, SolveReport]:
    """Stabilized biconjugate gradient for general square operators.

    Breakdown (vanishing rho, shadow inner product, or stabilization
    coefficient) is reported via ``converged=False``; callers fall back
    to the normal-equations route.

    Parameters and residual contract as in ``gmres_solve``.
    """
    n = op.dim_in
    tol, max_iter = _resolve_defaults(n, tol, max_iter)
    b = np.asarray(rhs, dtype=np.float64)
    threshold = tol * max(1.0, float(np.linalg.norm(b)))

    x = np.zeros(n)
    r = b.copy()
    res = float(np.linalg.norm(r))
    if res <= threshold:
        return x, SolveReport(0, res, True)
    r0 = r.copy()
    p = r.copy()
    rho = float(r @ r0)

    for k in range(1, max_iter + 1):
        v = op.apply(p)
        denom = float(v @ r0)
        if denom == 0.0 or not np.isfinite(denom):
            return x, SolveReport(k, res, False)
        alpha = rho / denom
        s = r - alpha * v
        res = float(np.linalg.norm(s))
        if res <= threshold:
            x += alpha * p
            return x, SolveReport(k, res, True)
        t = op.apply(s)
        tt = float(t @ t)
        if tt == 0.0 or not np.isfinite(tt):
            return x, SolveReport(k, res, False)
        omega = float(t @ s) / tt
        if omega == 0.0:
            return x, SolveReport(k, res, False)
        x += alpha * p + omega * s
        r = s - omega * t
        res = float(np.linalg.norm(r))
        if res <= threshold:
            return x, SolveReport(k, res, True)
        rho_new = float(r @ r0)
        if rho_new == 0.0 or not np.isfinite(rho_new):
            return x, SolveReport(k, res, False)
        beta = (rho_new / rho) * (alpha / omega)
        p = r + beta * (p - omega * v)
        rho = rho_new
    return x, SolveReport(max_iter, res, False)


def normal_cg_solve(
    op: LinearMap,
    rhs: DenseVector,
    tol: Optional[float] = None,
    max_iter: Optional[int] = None,
) -> tuple[DenseVector, SolveReport]:
    """Least-squares solve via CG on the normal equations.

    Runs CG on ``A^T A x = A^T rhs``, which minimizes ``||A x - rhs||``;
    starting from zero keeps the iterates in the row space of ``A``, so a
    consistent singular system yields the minimum-norm solution. This is
    the fallback route when the forward operator may be non-invertible,
    and its report carries ``used_least_squares_fallback=True``.
    """
    n = op.dim_in
    tol, max_iter = _resolve_defaults(n, tol, max_iter)
    atb = op.apply_transpose(np.asarray(rhs, dtype=np.float64))
    normal_op = LinearMap(
        n, n, lambda v: op.apply_transpose(op.apply(v)),
        lambda w: op.apply_transpose(op.apply(w)),
    )
    x, report = cg_solve(normal_op, atb, tol=tol, max_iter=max_iter)
    report.used_least_squares_fallback = True
    return x, report


def dense_solve(a: DenseMatrix, b) -> DenseMatrix:
    """Direct dense solve of ``a X = b`` by partially pivoted LU.

    Parameters
    ----------
    a : matrix
        Square coefficient matrix.
    b : matrix or vector
        Right-hand side(s); a 1-d input returns a 1-d solution.

    Raises
    ------
    SingularMatrixError
        When any pivot falls below ``1e-12 * max|a|``.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("coefficient matrix must be square")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # pivot check below supersedes
        lu, piv = scipy.linalg.lu_factor(a, check_finite=False)
    scale = float(np.abs(a).max())
    if float(np.abs(np.diag(lu)).min()) <= 1e-12 * scale:
        raise SingularMatrixError("matrix is singular to working precision")
    return scipy.linalg.lu_solve((lu, piv), np.asarray(b, dtype=np.float64))

"""Inner solvers that produce approximate minimizers, the bi-level
outer-loop driver, and the unrolled-differentiation baseline.

All solvers run a fixed iteration budget rather than stopping on a
tolerance, so precision-versus-iterations curves are reproducible run to
run. Traces keep every iterate; at the problem sizes this library
targets that is cheap, and it is what the precision experiments consume.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import DiffFn2, DualVector, ScalarFn2
from .implicit import (
    FixedPointProblem,
    ImplicitConfig,
    RootProblem,
    hypergradient,
    to_root,
)
from .operators import BregmanProjOperator, MirrorMap, ProxOperator

__all__ = [
    "SolverTrace",
    "OuterConfig",
    "SolverDivergenceError",
    "gradient_descent",
    "proximal_gradient",
    "mirror_descent",
    "block_coordinate_descent",
    "bisection_root",
    "unrolled_jacobian",
    "outer_descent",
]

ARMIJO_SIGMA = 1e-4


class SolverDivergenceError(RuntimeError):
    """Raised when a solver run produces a non-finite quantity.

    ``trace`` holds the iterates recorded up to the failure when the
    solver keeps one (None otherwise).
    """

    def __init__(self, message: str, trace: Optional["SolverTrace"] = None):
        super().__init__(message)
        self.trace = trace


@dataclass
class SolverTrace:
    """Per-iteration record of a solver run.

    ``objectives[t]`` is the smooth objective at ``iterates[t]`` (solvers
    built around a prox cannot see the nonsmooth term, so it is not
    included). ``errors[t]`` is ||x_t - x_star|| and is filled only when
    the caller supplies a reference solution.
    """

    iterates: List[np.ndarray] = field(default_factory=list)
    objectives: List[float] = field(default_factory=list)
    errors: List[float] = field(default_factory=list)

    def __post_init__(self):
        if len(self.objectives) != len(self.iterates):
            raise ValueError("objectives and iterates must have equal "
                             "length")
        if self.errors and len(self.errors) != len(self.iterates):
            raise ValueError("errors must be empty or match iterates in "
                             "length")


@dataclass
class OuterConfig:
    """Knobs for the bi-level outer loop: heavy-ball step on theta plus
    the linear-solver policy for the hypergradient solves."""

    step_size: float
    momentum: float = 0.9
    steps: int = 100
    implicit: Optional[ImplicitConfig] = None

    def __post_init__(self):
        if self.step_size <= 0.0:
            raise ValueError("outer step size must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.steps < 0:
            raise ValueError("iteration budget must be nonnegative")


def _check_steps(steps: int) -> int:
    steps = int(steps)
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    return steps


def _check_eta(eta: float) -> float:
    eta = float(eta)
    if eta <= 0.0:
        raise ValueError("step size must be positive")
    return eta


def _record(trace: SolverTrace, f: ScalarFn2, x: np.ndarray, theta,
            x_star) -> float:
    val = float(f.eval(x, theta))
    trace.iterates.append(x.copy())
    trace.objectives.append(val)
    if x_star is not None:
        trace.errors.append(float(np.linalg.norm(x - x_star)))
    if not np.isfinite(val):
        raise SolverDivergenceError("objective became non-finite", trace)
    return val


def _grad(f: ScalarFn2, x, theta) -> np.ndarray:
    return np.asarray(ad.grad_value(f, x, theta), dtype=np.float64)


# ---------------------------------------------------------------------------
# First-order inner solvers


def _backtrack(f: ScalarFn2, x, theta, g, f0: float) -> float:
    # Halve from 1.0 until the Armijo decrease holds.
    gg = float(g @ g)
    eta = 1.0
    for _ in range(80):
        if float(f.eval(x - eta * g, theta)) <= f0 - ARMIJO_SIGMA * eta * gg:
            return eta
        eta *= 0.5
    raise SolverDivergenceError("line search found no Armijo decrease")


def gradient_descent(f: ScalarFn2, theta, x0, steps: int,
                     line_search: bool = False,
                     x_star=None) -> Tuple[np.ndarray, SolverTrace]:
    """Gradient descent x <- x - eta grad f. Without a line search the
    step is the unit step; with one, eta backtracks from 1.0 by halving
    until f(x - eta g) <= f(x) - 1e-4 eta ||g||^2."""
    steps = _check_steps(steps)
    x = np.array(x0, dtype=np.float64)
    trace = SolverTrace()
    fval = _record(trace, f, x, theta, x_star)
    for _ in range(steps):
        g = _grad(f, x, theta)
        eta = _backtrack(f, x, theta, g, fval) if line_search else 1.0
        x = x - eta * g
        fval = _record(trace, f, x, theta, x_star)
    return x, trace


def proximal_gradient(f: ScalarFn2, prox: ProxOperator, theta, x0,
                      steps: int, eta: float, accelerated: bool = False,
                      x_star=None) -> Tuple[np.ndarray, SolverTrace]:
    """Proximal gradient iteration x <- prox(x - eta grad f), plain or
    with Nesterov acceleration (momentum restart-free FISTA)."""
    steps = _check_steps(steps)
    eta = _check_eta(eta)
    x = np.array(x0, dtype=np.float64)
    trace = SolverTrace()
    _record(trace, f, x, theta, x_star)
    y, s = x, 1.0
    for _ in range(steps):
        point = y if accelerated else x
        stepped = point - eta * _grad(f, point, theta)
        x_new = np.asarray(prox.evaluate(stepped, theta), dtype=np.float64)
        if accelerated:
            s_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * s * s))
            y = x_new + ((s - 1.0) / s_new) * (x_new - x)
            s = s_new
        x = x_new
        _record(trace, f, x, theta, x_star)
    return x, trace


def mirror_descent(f: ScalarFn2, mirror: MirrorMap,
                   bproj: BregmanProjOperator, theta, x0, steps: int,
                   schedule: Callable[[int], float],
                   x_star=None) -> Tuple[np.ndarray, SolverTrace]:
    """Mirror descent: gradient step in mirror coordinates, Bregman
    projection back. ``schedule(t)`` supplies the step for iteration t;
    x0 must lie strictly inside the mirror map's domain."""
    steps = _check_steps(steps)
    x = np.array(x0, dtype=np.float64)
    trace = SolverTrace()
    _record(trace, f, x, theta, x_star)
    for t in range(steps):
        eta = float(schedule(t))
        if eta <= 0.0:
            raise ValueError(f"schedule produced step {eta} at iteration "
                             f"{t}; steps must be positive")
        shifted = np.asarray(mirror.forward(x)) - eta * _grad(f, x, theta)
        x = np.asarray(bproj.evaluate(shifted, theta), dtype=np.float64)
        _record(trace, f, x, theta, x_star)
    return x, trace


Block = Tuple[Tuple[int, int], ProxOperator, float]


def _check_blocks(blocks: Sequence[Block], dim: int) -> None:
    expect = 0
    for (start, stop), _, eta_i in blocks:
        if start != expect or stop <= start:
            raise ValueError("blocks must be contiguous nonempty ranges "
                             "partitioning the vector")
        _check_eta(eta_i)
        expect = stop
    if expect != dim:
        raise ValueError(f"blocks cover [0, {expect}) but the problem has "
                         f"dimension {dim}")


def block_coordinate_descent(f: ScalarFn2, blocks: Sequence[Block], theta,
                             x0, steps: int,
                             x_star=None) -> Tuple[np.ndarray, SolverTrace]:
    """Cyclic block proximal-gradient: one step sweeps the blocks in
    order, each update seeing the latest values of the others."""
    steps = _check_steps(steps)
    _check_blocks(blocks, f.dim_x)
    x = np.array(x0, dtype=np.float64)
    trace = SolverTrace()
    _record(trace, f, x, theta, x_star)
    for _ in range(steps):
        for (start, stop), prox, eta_i in blocks:
            g = _grad(f, x, theta)
            stepped = x[start:stop] - eta_i * g[start:stop]
            x = x.copy()
            x[start:stop] = np.asarray(prox.evaluate(stepped, theta),
                                       dtype=np.float64)
        _record(trace, f, x, theta, x_star)
    return x, trace


# ---------------------------------------------------------------------------
# Scalar root finding


def bisection_root(g: Callable[[float], float], lo: float, hi: float,
                   tol: float) -> float:
    """Bisection on [lo, hi]: returns a point with |g| <= tol, or the
    interval midpoint once the bracket has shrunk to tol."""
    lo, hi = float(lo), float(hi)
    if not tol > 0.0:
        raise ValueError("tol must be positive")
    if not lo < hi:
        raise ValueError("bracket must satisfy lo < hi")
    g_lo = float(g(lo))
    if abs(g_lo) <= tol:
        return lo
    g_hi = float(g(hi))
    if abs(g_hi) <= tol:
        return hi
    if g_lo * g_hi > 0.0:
        raise ValueError("g(lo) and g(hi) must bracket a sign change")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        g_mid = float(g(mid))
        if abs(g_mid) <= tol:
            return mid
        if g_lo * g_mid <= 0.0:
            hi = mid
        else:
            lo, g_lo = mid, g_mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# Unrolled differentiation baseline


def unrolled_jacobian(t_map: DiffFn2, theta, x0, steps: int) -> np.ndarray:
    """Derivative of the t-th iterate of x <- T(x, theta) in theta,
    propagated forward jointly with the iteration: one tangent per theta
    basis direction, carried through every step.

    This is the derivative of the iterate, not the fixed-point Jacobian;
    the two meet only in the many-steps limit of a contractive map.
    """
    steps = _check_steps(steps)
    theta = np.asarray(theta, dtype=np.float64)
    x = np.array(x0, dtype=np.float64)
    cols = np.zeros((t_map.dim_x, t_map.dim_theta))
    basis = np.eye(t_map.dim_theta)
    for _ in range(steps):
        if t_map.jvp is not None:
            new_cols = np.stack(
                [t_map.jvp(x, theta, cols[:, j], basis[j])
                 for j in range(t_map.dim_theta)], axis=1) \
                if t_map.dim_theta else cols
            x = np.asarray(t_map.eval(x, theta), dtype=np.float64)
        else:
            new_cols = np.empty_like(cols)
            for j in range(t_map.dim_theta):
                tag = ad.fresh_tag()
                out = t_map.eval(DualVector(x, cols[:, j].copy(), tag),
                                 DualVector(theta, basis[j].copy(), tag))
                new_cols[:, j] = np.asarray(ad.tangent_at(out, tag))
            x = np.asarray(t_map.eval(x, theta), dtype=np.float64)
        cols = new_cols
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(cols))):
            raise SolverDivergenceError("unrolled propagation became "
                                        "non-finite")
    return cols


# ---------------------------------------------------------------------------
# Bi-level outer loop


def _theta_partial(loss: ScalarFn2, x, theta) -> np.ndarray:
    # Partial gradient of the loss in theta at fixed x, one forward
    # pass per coordinate.
    out = np.empty(loss.dim_theta)
    e = np.zeros(loss.dim_theta)
    for j in range(loss.dim_theta):
        tag = ad.fresh_tag()
        e[j] = 1.0
        val = loss.eval(x, DualVector(theta, e.copy(), tag))
        e[j] = 0.0
        out[j] = float(np.asarray(ad.tangent_at(val, tag)))
    return out


def outer_descent(problem: Union[RootProblem, FixedPointProblem],
                  inner_solve: Callable[[np.ndarray], np.ndarray],
                  loss: ScalarFn2, theta0,
                  cfg: OuterConfig) -> Tuple[np.ndarray, List[float]]:
    """Heavy-ball descent on theta for the bi-level problem
    min_theta L(x*(theta), theta) with x*(theta) characterized by
    ``problem``.

    Each outer step calls ``inner_solve(theta)`` for x_hat, forms the
    hypergradient d_theta L + J^T d_x L through one adjoint solve on the
    optimality condition, and updates theta with momentum. Returns the
    final theta and the loss value at every visited theta (budget + 1
    entries).
    """
    rp = problem if isinstance(problem, RootProblem) else to_root(problem)
    theta = np.array(theta0, dtype=np.float64)
    velocity = np.zeros_like(theta)
    losses: List[float] = []

    def solve_and_loss(t: int) -> Tuple[np.ndarray, float]:
        try:
            x_hat = np.asarray(inner_solve(theta), dtype=np.float64)
        except Exception as exc:
            raise RuntimeError(f"inner solve failed at outer step {t}: "
                               f"{exc}") from exc
        val = float(loss.eval(x_hat, theta))
        if not np.isfinite(val):
            raise SolverDivergenceError(
                f"outer loss became non-finite at step {t}")
        return x_hat, val

    for t in range(cfg.steps):
        x_hat, val = solve_and_loss(t)
        losses.append(val)
        grad_x = _grad(loss, x_hat, theta)
        hyper = hypergradient(rp, x_hat, theta, grad_x, cfg.implicit)
        hyper = hyper + _theta_partial(loss, x_hat, theta)
        velocity = cfg.momentum * velocity - cfg.step_size * hyper
        theta = theta + velocity
    losses.append(solve_and_loss(cfg.steps)[1])
    return theta, losses

"""Jacobian-error bound: certified constants and bound evaluation.

The approximate-solution Jacobian J(x_hat, theta) differs from the true
solution Jacobian by at most a constant times the iterate error
||x_hat - x*||; this module computes that constant for the ridge family
(where every ingredient is available in closed form) and evaluates the
bound for given constants elsewhere.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .linalg import dense_solve

__all__ = [
    "BoundConstants",
    "RidgeProblemData",
    "theorem1_bound",
    "corollary2_bound",
    "ridge_constants",
    "ridge_closed_form",
]


@dataclass
class BoundConstants:
    """Constants entering the Jacobian-error bound.

    alpha bounds the conditioning of the sensitivity operator from
    below, beta and gamma are Lipschitz constants of the B and A
    operators in x, and r bounds ||B(x*, theta)||. eps is the radius
    around x* within which the constants are certified. mu and kappa
    extend the bound to proximal-gradient fixed points: mu is the
    strong-convexity modulus of the nonsmooth term and kappa the
    Lipschitz constant of the update map's prox step; both default to
    zero, which recovers the smooth bound.
    """

    alpha: float
    beta: float
    gamma: float
    r: float
    eps: float = math.inf
    mu: float = 0.0
    kappa: float = 0.0

    def __post_init__(self):
        if self.alpha <= 0.0:
            raise ValueError("alpha must be positive")
        for name in ("beta", "gamma", "r", "eps", "mu", "kappa"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass
class RidgeProblemData:
    """Data of the ridge problem min_x ||Phi x - y||^2 + sum theta_i x_i^2."""

    phi: np.ndarray
    y: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.phi.ndim != 2:
            raise ValueError("Phi must be a matrix")
        m, d = self.phi.shape
        if self.y.shape != (m,):
            raise ValueError("y must match the row count of Phi")
        if self.theta.shape != (d,):
            raise ValueError("theta must match the column count of Phi")
        if np.any(self.theta <= 0.0):
            raise ValueError("theta must be strictly positive")


def _check_error(iterate_error: float, eps: float) -> float:
    iterate_error = float(iterate_error)
    if iterate_error < 0.0:
        raise ValueError("iterate error must be nonnegative")
    if iterate_error > eps:
        warnings.warn("iterate error exceeds the bound's validity radius; "
                      "the returned value is not certified", stacklevel=3)
    return iterate_error


def theorem1_bound(k: BoundConstants, iterate_error: float) -> float:
    """The Jacobian-error bound (beta/alpha + gamma r / alpha^2) times
    the iterate error. Warns when the error lies outside the certified
    radius eps."""
    if k.alpha <= 0.0:
        raise ValueError("alpha must be positive")
    iterate_error = _check_error(iterate_error, k.eps)
    return (k.beta / k.alpha + k.gamma * k.r / k.alpha ** 2) * iterate_error


def corollary2_bound(k: BoundConstants, iterate_error: float) -> float:
    """Proximal-gradient variant of the bound: the prox contributes its
    Lipschitz constant kappa to the numerator, the strong convexity mu
    of the nonsmooth term to the conditioning. With mu = kappa = 0 this
    is theorem1_bound."""
    if k.alpha <= 0.0:
        raise ValueError("alpha must be positive")
    iterate_error = _check_error(iterate_error, k.eps)
    denom = k.alpha + k.mu
    return ((k.beta + k.kappa) / denom
            + k.gamma * k.r / denom ** 2) * iterate_error


def _gram(p: RidgeProblemData) -> np.ndarray:
    return p.phi.T @ p.phi + np.diag(p.theta)


def _min_eigenvalue_inverse_power(h: np.ndarray, tol: float = 1e-10):
    # Inverse power iteration with Rayleigh-quotient stopping; h is
    # symmetric positive definite here (theta > 0).
    d = h.shape[0]
    v = np.ones(d) + 1e-3 * np.arange(d)
    v /= np.linalg.norm(v)
    rayleigh = float(v @ (h @ v))
    for _ in range(10 * d):
        w = dense_solve(h, v)
        v = w / np.linalg.norm(w)
        new = float(v @ (h @ v))
        if abs(new - rayleigh) <= tol * max(1.0, abs(new)):
            return new
        rayleigh = new
    raise RuntimeError("inverse power iteration did not converge to the "
                       "smallest eigenvalue")


def ridge_closed_form(p: RidgeProblemData):
    """Exact solution and solution Jacobian of the ridge problem:
    x* = (Phi^T Phi + diag theta)^{-1} Phi^T y, and column j of the
    Jacobian solves the same system against -e_j x*_j (differentiate
    the stationarity equation in theta_j)."""
    h = _gram(p)
    x_star = dense_solve(h, p.phi.T @ p.y)
    d = h.shape[0]
    jac = np.zeros((d, d))
    for j in range(d):
        rhs = np.zeros(d)
        rhs[j] = -x_star[j]
        jac[:, j] = dense_solve(h, rhs)
    return x_star, jac


def ridge_constants(p: RidgeProblemData) -> BoundConstants:
    """Certified bound constants for the ridge family. The Hessian
    2(Phi^T Phi + diag theta) does not depend on x, so gamma = 0 and the
    bound holds globally (eps infinite); beta = 2 and r = 2||x*|| come
    from the parameter coupling 2 diag(x)."""
    h = _gram(p)
    alpha = 2.0 * _min_eigenvalue_inverse_power(h)
    x_star, _ = ridge_closed_form(p)
    return BoundConstants(alpha=alpha, beta=2.0, gamma=0.0,
                          r=2.0 * float(np.linalg.norm(x_star)))

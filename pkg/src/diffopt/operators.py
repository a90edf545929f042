"""Projection and proximal operator catalog with differentiable evaluations.

Every evaluation is written over the dual-number primitives in
``autodiff``, so the operators can sit inside fixed-point maps that get
differentiated implicitly: tangents flow through the point ``y`` and,
where it makes sense, through the set parameters (radii, bounds, offsets).
Derivatives at kinks follow the subgradient-0 convention of ``autodiff``
and near-kink queries are counted on ``autodiff.kink_monitor``.

``proj_oracle`` is the odd one out: a brute-force reference projector
for low dimensions, primal-only, used to validate the closed forms.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, List, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import KINK_TOL, DualVector, deep_primal, kink_monitor
from .linalg import dense_solve

__all__ = [
    "ProjOperator",
    "ProxOperator",
    "BregmanProjOperator",
    "MirrorMap",
    "proj_nonneg",
    "proj_box",
    "proj_simplex",
    "proj_simplex_jvp",
    "proj_l1_ball",
    "proj_l2_ball",
    "proj_linf_ball",
    "proj_affine",
    "proj_hyperplane",
    "proj_halfspace",
    "proj_box_section",
    "kl_proj_simplex",
    "prox_lasso",
    "prox_elastic_net",
    "prox_group_lasso",
    "proj_oracle",
    "entropy_mirror_map",
    "euclidean_mirror_map",
]


@dataclass
class ProjOperator:
    """Euclidean projection onto a parametric set.

    ``evaluate(y, theta)`` must be expressible over the autodiff
    primitives (or ship a hand-written tangent rule) so fixed-point maps
    built from it stay differentiable. Expected to be idempotent,
    nonexpansive, and feasible; the test suite checks instances against
    those properties.
    """

    evaluate: Callable
    descriptor: str = ""


@dataclass
class ProxOperator:
    """Proximity operator of a convex term g, same differentiability contract.

    ``evaluate(y, theta)`` returns argmin_x 1/2||x-y||^2 + g(x; theta)
    and is 1-Lipschitz in y.
    """

    evaluate: Callable
    descriptor: str = ""


@dataclass
class BregmanProjOperator:
    """Projection measured in a Bregman divergence rather than Euclidean.

    ``evaluate(y, theta)`` maps a point expressed in mirror coordinates
    back onto the feasible set; under the KL geometry on the simplex this
    is the softmax (``kl_proj_simplex``).
    """

    evaluate: Callable
    descriptor: str = ""


@dataclass
class MirrorMap:
    """Gradient pair of a mirror potential: forward is the map into
    mirror coordinates, inverse is its convex-conjugate gradient.

    Invariant: inverse(forward(x)) = x on the domain, within 1e-10.
    """

    descriptor: str
    forward: Callable
    inverse: Callable


def _primal(v) -> np.ndarray:
    return np.asarray(deep_primal(v), dtype=np.float64)


def _is_dual(*vals) -> bool:
    return any(isinstance(v, DualVector) for v in vals)


def _scalar(v) -> float:
    return float(_primal(v))


# ---------------------------------------------------------------------------
# Cones, boxes, simplex


def proj_nonneg(y):
    """Projection onto the nonnegative orthant: max(y, 0) elementwise."""
    return ad.maximum(y, 0.0)


def proj_box(y, lo, hi):
    """Projection onto the box [lo, hi]: elementwise clamp."""
    lo_p, hi_p = _primal(lo), _primal(hi)
    if np.any(lo_p > hi_p):
        raise ValueError("box is empty: lo > hi somewhere")
    return ad.clip(y, lo, hi)


def _simplex_threshold(z: np.ndarray, radius: float) -> float:
    # Descending stable sort, then include index j while u_j > tau_j.
    u = np.sort(z, kind="stable")[::-1]
    css = np.cumsum(u)
    taus = (css - radius) / np.arange(1, z.shape[0] + 1)
    k = int(np.max(np.nonzero(u > taus)[0])) + 1
    return taus[k - 1]


def _simplex(y, radius):
    """Scaled-simplex projection {x >= 0, sum x = radius}, dual-capable."""
    z = _primal(y)
    tau = _simplex_threshold(z, _scalar(radius))
    if not _is_dual(y, radius):
        return np.maximum(z - tau, 0.0)
    # Support-indicator tangent rule: fix s from the primal output and
    # differentiate x_s = y_s - (sum_s y - radius) / |s| on the support.
    kink_monitor.note(int(np.count_nonzero(np.abs(z - tau) <= KINK_TOL)))
    s = (np.maximum(z - tau, 0.0) > 1e-12).astype(np.float64)
    k = float(np.sum(s))
    tau_d = ad.div(ad.sub(ad.dot(s, y), radius), k)
    return ad.mul(s, ad.sub(y, tau_d))


def proj_simplex(y):
    """Projection onto the probability simplex.

    Sort-based O(d log d) algorithm; the tangent follows the
    diag(s) - s s^T / ||s||_1 rule with s the indicator of
    strictly-positive output coordinates.
    """
    return _simplex(y, 1.0)


def proj_simplex_jvp(y, v) -> np.ndarray:
    """Tangent of the simplex projection at y along v, via the
    support-indicator formula (diag(s) - s s^T / ||s||_1) v."""
    z = np.asarray(y, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    tau = _simplex_threshold(z, 1.0)
    s = (np.maximum(z - tau, 0.0) > 1e-12).astype(np.float64)
    return s * (v - float(s @ v) / float(np.sum(s)))


# ---------------------------------------------------------------------------
# Norm balls


def _check_radius(radius) -> float:
    r = _scalar(radius)
    if r <= 0.0:
        raise ValueError("ball radius must be positive")
    return r


def proj_l1_ball(y, radius):
    """Projection onto {x : ||x||_1 <= radius}.

    Points already inside the ball are returned unchanged (boundary
    included); outside, the problem reduces to a scaled-simplex
    projection of |y| with the signs restored afterwards.
    """
    r = _check_radius(radius)
    z = _primal(y)
    lv = float(np.sum(np.abs(z)))
    if _is_dual(y, radius) and abs(lv - r) <= KINK_TOL:
        kink_monitor.note(1)
    if lv <= r:
        return y if _is_dual(y, radius) else z.copy()
    sigma = np.sign(z)
    return ad.mul(sigma, _simplex(ad.absolute(y), radius))


def proj_l2_ball(y, radius):
    """Projection onto {x : ||x||_2 <= radius}: radial scaling
    min(1, radius/||y||) y."""
    r = _check_radius(radius)
    z = _primal(y)
    nz = float(np.linalg.norm(z))
    if _is_dual(y, radius) and abs(nz - r) <= KINK_TOL:
        kink_monitor.note(1)
    if nz <= r:
        return y if _is_dual(y, radius) else z.copy()
    return ad.mul(ad.div(radius, ad.norm2(y)), y)


def proj_linf_ball(y, radius):
    """Projection onto {x : ||x||_inf <= radius}: clip to [-radius, radius]."""
    _check_radius(radius)
    neg = -radius if isinstance(radius, DualVector) else -_scalar(radius)
    return ad.clip(y, neg, radius)


# ---------------------------------------------------------------------------
# Affine sets, hyperplanes, half-spaces


def proj_affine(y, a_mat, b):
    """Projection onto {x : A x = b}: y - A^T (A A^T)^{-1} (A y - b).

    A is a constant matrix (no tangents through it); y and b may carry
    tangents. A rank-deficient A makes the Gram solve fail.
    """
    a = np.asarray(a_mat, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("A must be a matrix")
    gram = np.asarray(a @ a.T, order="F")
    resid = ad.sub(ad.matvec(a, y), b)
    u = _apply_linear(lambda r: dense_solve(gram, r), resid)
    return ad.sub(y, ad.matvec(a.T, u))


def _apply_linear(solve: Callable, v):
    # Push a (constant) linear solve through dual structure layer by layer.
    if isinstance(v, DualVector):
        return DualVector(_apply_linear(solve, v.primal),
                          _apply_linear(solve, v.tangent), v.tag)
    return solve(np.asarray(v, dtype=np.float64))


def _check_normal(a) -> None:
    if float(np.linalg.norm(_primal(a))) == 0.0:
        raise ValueError("normal vector must be nonzero")


def proj_hyperplane(y, a, b):
    """Projection onto {x : a^T x = b}: y - ((a^T y - b)/||a||^2) a."""
    _check_normal(a)
    coef = ad.div(ad.sub(ad.dot(a, y), b), ad.dot(a, a))
    return ad.sub(y, ad.mul(coef, a))


def proj_halfspace(y, a, b):
    """Projection onto {x : a^T x <= b}; interior points are fixed."""
    _check_normal(a)
    coef = ad.div(ad.maximum(ad.sub(ad.dot(a, y), b), 0.0), ad.dot(a, a))
    return ad.sub(y, ad.mul(coef, a))


# ---------------------------------------------------------------------------
# Box sections


def proj_box_section(y, alpha, beta, w, c):
    """Projection onto the box section {x : alpha <= x <= beta, w^T x = c}.

    A singly-constrained bounded QP. The scalar dual mu solves
    sum_i w_i clip(w_i mu + y_i, alpha_i, beta_i) = c, found by bisection
    to 1e-12; the output is clip(w mu + y, alpha, beta). Differentiation
    composes the one-dimensional implicit derivative of mu (a single
    Newton correction carried out in dual arithmetic) with the clip
    chain rule.
    """
    al, be = _primal(alpha), _primal(beta)
    wv, z = _primal(w), _primal(y)
    cc = _scalar(c)
    if np.any(al > be):
        raise ValueError("box is empty: alpha > beta somewhere")

    def resid(mu: float) -> float:
        return float(wv @ np.clip(wv * mu + z, al, be)) - cc

    mu = _section_dual_root(resid, z, al, be, wv)

    # Interior terms are the only ones moving with mu.
    q = wv * mu + z
    interior = (q > al) & (q < be)
    slope = float(np.sum(wv[interior] ** 2))
    rho = ad.sub(ad.dot(wv, ad.clip(ad.add(ad.mul(wv, mu), y), alpha, beta)),
                 c)
    if slope > 1e-12:
        mu_d = ad.sub(mu, ad.div(rho, slope))
    else:
        mu_d = mu
    return ad.clip(ad.add(ad.mul(wv, mu_d), y), alpha, beta)


def _section_dual_root(resid: Callable, z, al, be, wv) -> float:
    moving = np.abs(wv) > 0.0
    if not np.any(moving):
        if abs(resid(0.0)) > 1e-9:
            raise ValueError("box section is empty: w = 0 and w^T x != c")
        return 0.0
    ends = np.concatenate([((al - z)[moving]) / wv[moving],
                           ((be - z)[moving]) / wv[moving]])
    lo, hi = float(np.min(ends)), float(np.max(ends))
    span = max(hi - lo, 1.0)
    # The residual is nondecreasing in mu and saturates outside the end
    # points; expand geometrically in case of boundary ties, and give up
    # when expanding stops changing it (the target is unreachable).
    for _ in range(60):
        if resid(lo) <= 0.0:
            break
        nxt = lo - span
        span *= 2.0
        if resid(nxt) == resid(lo):
            lo = nxt
            break
        lo = nxt
    for _ in range(60):
        if resid(hi) >= 0.0:
            break
        nxt = hi + span
        span *= 2.0
        if resid(nxt) == resid(hi):
            hi = nxt
            break
        hi = nxt
    if resid(lo) > 1e-9 or resid(hi) < -1e-9:
        raise ValueError("box section is empty: w^T x = c is unreachable "
                         "within the bounds")
    for _ in range(200):
        if hi - lo <= 1e-12:
            break
        mid = 0.5 * (lo + hi)
        if resid(mid) < 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# Bregman projection


def kl_proj_simplex(y):
    """KL projection of mirror-space y onto the simplex: the softmax,
    computed with max-subtraction."""
    shift = float(np.max(_primal(y)))
    e = ad.exp(ad.sub(y, shift))
    return ad.div(e, ad.vsum(e))


# ---------------------------------------------------------------------------
# Proximal operators


def _check_scale(scale) -> float:
    s = _scalar(scale)
    if s < 0.0:
        raise ValueError("prox scale must be nonnegative")
    return s


def _soft_threshold(y, scale):
    sigma = np.sign(_primal(y))
    return ad.mul(sigma, ad.maximum(ad.sub(ad.absolute(y), scale), 0.0))


def prox_lasso(y, scale):
    """Soft thresholding: sign(y_i) max(|y_i| - scale, 0)."""
    _check_scale(scale)
    return _soft_threshold(y, scale)


def prox_elastic_net(y, l1, l2):
    """Prox of l1 ||x||_1 + (l2/2) ||x||^2: shrink then scale,
    ST(y, l1) / (1 + l2)."""
    _check_scale(l1)
    _check_scale(l2)
    return ad.div(_soft_threshold(y, l1), ad.add(1.0, l2))


def _check_blocks(blocks: Sequence[Tuple[int, int]], dim: int) -> None:
    expect = 0
    for start, stop in blocks:
        if start != expect or stop <= start:
            raise ValueError("blocks must be contiguous nonempty ranges "
                             "partitioning the vector")
        expect = stop
    if expect != dim:
        raise ValueError(f"blocks cover [0, {expect}) but the vector has "
                         f"length {dim}")


def prox_group_lasso(y, scale, blocks: Sequence[Tuple[int, int]]):
    """Block soft thresholding: per block, max(1 - scale/||y_blk||, 0) y_blk."""
    s = _check_scale(scale)
    z = _primal(y)
    _check_blocks(blocks, z.shape[0])
    parts = []
    for start, stop in blocks:
        y_blk = y[start:stop] if isinstance(y, DualVector) else z[start:stop]
        nb = float(np.linalg.norm(z[start:stop]))
        if _is_dual(y, scale) and abs(nb - s) <= KINK_TOL:
            kink_monitor.note(1)
        if nb <= s:
            parts.append(ad.mul(y_blk, 0.0))
        else:
            parts.append(ad.mul(ad.sub(1.0, ad.div(scale, ad.norm2(y_blk))),
                                y_blk))
    return ad.concat(parts)


# ---------------------------------------------------------------------------
# Brute-force reference projections


def proj_oracle(kind: str, y, lo=None, hi=None, radius: float = 1.0
                ) -> np.ndarray:
    """Reference projection by exhaustive active-set enumeration.

    Primal-only and deliberately independent of the closed forms above:
    candidates are generated from every support (and sign) pattern and
    the feasible one nearest to y wins. Supported kinds: "simplex",
    "box" (pass lo, hi), "l1_ball" (pass radius). Small dimensions only.
    """
    z = np.asarray(deep_primal(y), dtype=np.float64)
    d = z.shape[0]
    if d > 8:
        raise ValueError("oracle enumeration is limited to dimension <= 8")
    if kind == "simplex":
        return _oracle_simplex(z)
    if kind == "box":
        if lo is None or hi is None:
            raise ValueError("box oracle needs lo and hi")
        return _oracle_box(z, np.asarray(lo, dtype=np.float64),
                           np.asarray(hi, dtype=np.float64))
    if kind == "l1_ball":
        return _oracle_l1(z, float(radius))
    raise ValueError(f"unknown set descriptor {kind!r}")


def _oracle_simplex(z: np.ndarray) -> np.ndarray:
    d = z.shape[0]
    best, best_dist = None, np.inf
    for size in range(1, d + 1):
        for support in itertools.combinations(range(d), size):
            idx = list(support)
            lam = (1.0 - float(np.sum(z[idx]))) / size
            x = np.zeros(d)
            x[idx] = z[idx] + lam
            if np.min(x[idx]) < -1e-12:
                continue
            dist = float(np.sum((x - z) ** 2))
            if dist < best_dist:
                best, best_dist = np.maximum(x, 0.0), dist
    return best


def _oracle_box(z: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    for i in range(z.shape[0]):
        cands = [v for v in (z[i], lo[i], hi[i]) if lo[i] <= v <= hi[i]]
        out[i] = min(cands, key=lambda v: abs(v - z[i]))
    return out


def _oracle_l1(z: np.ndarray, radius: float) -> np.ndarray:
    d = z.shape[0]
    cands: List[np.ndarray] = []
    if float(np.sum(np.abs(z))) <= radius + 1e-12:
        cands.append(z.copy())
    for size in range(1, d + 1):
        for support in itertools.combinations(range(d), size):
            idx = list(support)
            for signs in itertools.product((-1.0, 1.0), repeat=size):
                sg = np.asarray(signs)
                lam = (float(sg @ z[idx]) - radius) / size
                x = np.zeros(d)
                x[idx] = z[idx] - lam * sg
                if np.min(sg * x[idx]) < -1e-12:
                    continue
                cands.append(x)
    return min(cands, key=lambda x: float(np.sum((x - z) ** 2)))


# ---------------------------------------------------------------------------
# Mirror maps


def entropy_mirror_map() -> MirrorMap:
    """Negative-entropy potential on the positive orthant:
    forward log(x) + 1, inverse exp(y - 1)."""

    def forward(x):
        if float(np.min(_primal(x))) <= 0.0:
            raise ValueError("entropy mirror map requires strictly positive "
                             "coordinates")
        return ad.add(ad.log(x), 1.0)

    return MirrorMap(descriptor="negative entropy",
                     forward=forward,
                     inverse=lambda yv: ad.exp(ad.sub(yv, 1.0)))


def euclidean_mirror_map() -> MirrorMap:
    """Half squared norm potential; both maps are the identity."""

    def ident(v):
        return v

    return MirrorMap(descriptor="euclidean", forward=ident, inverse=ident)

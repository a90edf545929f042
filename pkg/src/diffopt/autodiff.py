"""Forward-mode automatic differentiation on nestable dual vectors.

A ``DualVector`` pairs a primal value with a tangent and carries an
integer tag identifying which differentiation the tangent belongs to.
Tags come from a global monotone counter, so independent perturbations
that meet inside one evaluation are never cross-paired: when operands
carry different tags, the newer (higher) tag is the outermost layer and
the older operand propagates as a constant at that layer. Nesting a
differentiation inside another one is therefore safe, which is how the
second-order products (Hessian-vector and mixed-derivative products)
are computed here, with no reverse tape.

Derivative convention at non-differentiable kinks (``maximum``, ``absolute``,
the norms at zero): the derivative is 0 at the kink. Whenever a
differentiated evaluation queries one of these primitives within 1e-9 of
its kink, the event is counted on ``kink_monitor`` so callers can flag
estimates taken at barely differentiable points.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

__all__ = [
    "DualVector",
    "DiffFn2",
    "ScalarFn2",
    "kink_monitor",
    "deep_primal",
    "jvp_x",
    "jvp_theta",
    "vjp_x",
    "grad_x",
    "hvp_x",
    "cross_jvp",
    "finite_diff_jacobian",
    "check_user_closures",
    "check_gradient",
]

Value = Union[np.ndarray, "DualVector"]

_TAGS = itertools.count(1)

KINK_TOL = 1e-9


def fresh_tag() -> int:
    """Allocate a new differentiation tag (strictly increasing)."""
    return next(_TAGS)


class KinkMonitor:
    """Counter of differentiated evaluations near a kink.

    ``count`` accumulates how many scalar entries sat within 1e-9 of a
    non-differentiable point while a derivative was being propagated
    through them. Reset it before a query, read it after.
    """

    def __init__(self):
        self.count = 0

    def note(self, n: int) -> None:
        self.count += int(n)

    def reset(self) -> None:
        self.count = 0


kink_monitor = KinkMonitor()


def _note_kinks(near_mask) -> None:
    n = int(np.count_nonzero(near_mask))
    if n:
        kink_monitor.note(n)


class DualVector:
    """Primal/tangent pair for one tagged differentiation.

    ``primal`` and ``tangent`` have equal shapes and are either plain
    float64 arrays or further DualVectors carrying strictly older tags.
    Arithmetic is overloaded; numpy's ufunc dispatch is opted out of so
    ``ndarray (op) DualVector`` falls back to the reflected methods here.
    """

    __slots__ = ("primal", "tangent", "tag")
    __array_ufunc__ = None  # force `ndarray op dual` through our reflected ops

    def __init__(self, primal: Value, tangent: Value, tag: int):
        if np.shape(deep_primal(primal)) != np.shape(deep_primal(tangent)):
            raise ValueError("primal and tangent must have equal shapes")
        self.primal = primal
        self.tangent = tangent
        self.tag = tag

    @property
    def shape(self):
        return np.shape(deep_primal(self))

    def __len__(self):
        return self.shape[0]

    def __repr__(self):
        return (f"DualVector(primal={deep_primal(self)!r}, "
                f"tag={self.tag})")

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matvec(self, other)

    def __rmatmul__(self, other):
        return matvec(other, self)

    def __getitem__(self, idx):
        return DualVector(_index(self.primal, idx), _index(self.tangent, idx),
                          self.tag)


def _index(v: Value, idx):
    if isinstance(v, DualVector):
        return v[idx]
    return np.asarray(v)[idx]


def _tag_of(v) -> int:
    return v.tag if isinstance(v, DualVector) else 0


def deep_primal(v: Value) -> np.ndarray:
    """Strip all dual layers, returning the underlying point value."""
    while isinstance(v, DualVector):
        v = v.primal
    return np.asarray(v, dtype=np.float64)


def primal_at(v: Value, tag: int) -> Value:
    """The primal of ``v`` at ``tag``; ``v`` itself when it lacks that tag."""
    if isinstance(v, DualVector) and v.tag == tag:
        return v.primal
    return v


def tangent_at(v: Value, tag: int) -> Value:
    """The tangent of ``v`` at ``tag``; a zero of matching shape otherwise."""
    if isinstance(v, DualVector) and v.tag == tag:
        return v.tangent
    return np.zeros(np.shape(deep_primal(v)))


def _binary_parts(a: Value, b: Value):
    """Split two operands at their newest tag. Returns (tag, pa, da, pb, db)
    or None when both are tag-free."""
    t = max(_tag_of(a), _tag_of(b))
    if t == 0:
        return None
    return t, primal_at(a, t), tangent_at(a, t), primal_at(b, t), tangent_at(b, t)


def add(a: Value, b: Value) -> Value:
    parts = _binary_parts(a, b)
    if parts is None:
        return np.asarray(a, dtype=np.float64) + np.asarray(b, dtype=np.float64)
    t, pa, da, pb, db = parts
    return DualVector(add(pa, pb), add(da, db), t)


def sub(a: Value, b: Value) -> Value:
    parts = _binary_parts(a, b)
    if parts is None:
        return np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    t, pa, da, pb, db = parts
    return DualVector(sub(pa, pb), sub(da, db), t)


def mul(a: Value, b: Value) -> Value:
    """Elementwise (and scalar) product with the full product rule."""
    parts = _binary_parts(a, b)
    if parts is None:
        return np.asarray(a, dtype=np.float64) * np.asarray(b, dtype=np.float64)
    t, pa, da, pb, db = parts
    return DualVector(mul(pa, pb), add(mul(da, pb), mul(pa, db)), t)


def div(a: Value, b: Value) -> Value:
    """Elementwise quotient, (a/b)' = (a'b - ab') / b^2."""
    parts = _binary_parts(a, b)
    if parts is None:
        return np.asarray(a, dtype=np.float64) / np.asarray(b, dtype=np.float64)
    t, pa, da, pb, db = parts
    quotient = div(pa, pb)
    return DualVector(quotient, div(sub(da, mul(quotient, db)), pb), t)


def power(a: Value, exponent: float) -> Value:
    """Constant-exponent power, derivative c * a^(c-1)."""
    if not isinstance(a, DualVector):
        return np.asarray(a, dtype=np.float64) ** exponent
    p = power(a.primal, exponent)
    deriv = mul(exponent, power(a.primal, exponent - 1.0))
    return DualVector(p, mul(deriv, a.tangent), a.tag)


def dot(a: Value, b: Value) -> Value:
    """Inner product of two vectors."""
    parts = _binary_parts(a, b)
    if parts is None:
        return np.dot(np.asarray(a, dtype=np.float64),
                      np.asarray(b, dtype=np.float64))
    t, pa, da, pb, db = parts
    return DualVector(dot(pa, pb), add(dot(da, pb), dot(pa, db)), t)


def matvec(m: Value, v: Value) -> Value:
    """Matrix product m @ v; either factor may be dual (bilinear rule)."""
    parts = _binary_parts(m, v)
    if parts is None:
        return np.asarray(m, dtype=np.float64) @ np.asarray(v, dtype=np.float64)
    t, pm, dm, pv, dv = parts
    return DualVector(matvec(pm, pv), add(matvec(dm, pv), matvec(pm, dv)), t)


def exp(a: Value) -> Value:
    if not isinstance(a, DualVector):
        return np.exp(np.asarray(a, dtype=np.float64))
    p = exp(a.primal)
    return DualVector(p, mul(p, a.tangent), a.tag)


def log(a: Value) -> Value:
    if not isinstance(a, DualVector):
        return np.log(np.asarray(a, dtype=np.float64))
    return DualVector(log(a.primal), div(a.tangent, a.primal), a.tag)


def sqrt(a: Value) -> Value:
    if not isinstance(a, DualVector):
        return np.sqrt(np.asarray(a, dtype=np.float64))
    p = sqrt(a.primal)
    return DualVector(p, div(a.tangent, mul(2.0, p)), a.tag)


def _extremum(a: Value, b: Value, take_a: np.ndarray,
              take_b: np.ndarray) -> Value:
    """Shared max/min body: value follows the winner (either at exact
    ties), the newest tag's tangent is zeroed at ties."""
    t = max(_tag_of(a), _tag_of(b))
    pa, da = primal_at(a, t), tangent_at(a, t)
    pb, db = primal_at(b, t), tangent_at(b, t)
    zero = np.zeros(np.broadcast_shapes(np.shape(deep_primal(a)),
                                        np.shape(deep_primal(b))))
    value = where(take_a, pa, where(take_b, pb, pa))
    tangent = where(take_a, da, where(take_b, db, zero))
    return DualVector(value, tangent, t)


def maximum(a: Value, b: Value) -> Value:
    """Elementwise max; derivative follows the strict winner, 0 at ties."""
    if not isinstance(a, DualVector) and not isinstance(b, DualVector):
        return np.maximum(np.asarray(a, dtype=np.float64),
                          np.asarray(b, dtype=np.float64))
    pa, pb = deep_primal(a), deep_primal(b)
    _note_kinks(np.abs(pa - pb) <= KINK_TOL)
    return _extremum(a, b, pa > pb, pb > pa)


def minimum(a: Value, b: Value) -> Value:
    """Elementwise min with the same tie convention as maximum."""
    if not isinstance(a, DualVector) and not isinstance(b, DualVector):
        return np.minimum(np.asarray(a, dtype=np.float64),
                          np.asarray(b, dtype=np.float64))
    pa, pb = deep_primal(a), deep_primal(b)
    _note_kinks(np.abs(pa - pb) <= KINK_TOL)
    return _extremum(a, b, pa < pb, pb < pa)


def clip(a: Value, lo: Value, hi: Value) -> Value:
    return minimum(maximum(a, lo), hi)


def absolute(a: Value) -> Value:
    """Elementwise absolute value; derivative sign(a), 0 at the origin."""
    if not isinstance(a, DualVector):
        return np.abs(np.asarray(a, dtype=np.float64))
    p = deep_primal(a)
    _note_kinks(np.abs(p) <= KINK_TOL)
    return mul(np.sign(p), a)


def vsum(a: Value) -> Value:
    """Sum of all entries."""
    if not isinstance(a, DualVector):
        return np.sum(np.asarray(a, dtype=np.float64))
    return DualVector(vsum(a.primal), vsum(a.tangent), a.tag)


def norm2(a: Value) -> Value:
    """Euclidean norm; derivative 0 at the origin."""
    if not isinstance(a, DualVector):
        return np.linalg.norm(np.asarray(a, dtype=np.float64))
    s = dot(a, a)
    if float(deep_primal(s)) <= KINK_TOL ** 2:
        _note_kinks(np.array([True]))
        return mul(s, 0.0)
    return sqrt(s)


def norm1(a: Value) -> Value:
    """Sum of absolute values (kink convention per ``absolute``)."""
    if not isinstance(a, DualVector):
        return float(np.sum(np.abs(np.asarray(a, dtype=np.float64))))
    return vsum(absolute(a))


def norm_inf(a: Value) -> Value:
    """Largest absolute entry; derivative follows the first argmax."""
    if not isinstance(a, DualVector):
        return float(np.max(np.abs(np.asarray(a, dtype=np.float64))))
    m = absolute(a)
    p = deep_primal(m)
    top = int(np.argmax(p))
    near_top = int(np.count_nonzero(np.abs(p - p[top]) <= KINK_TOL))
    if near_top > 1:
        kink_monitor.note(near_top - 1)
    return m[top]


def where(mask: np.ndarray, a: Value, b: Value) -> Value:
    """Selection by a constant boolean mask (mask is not differentiated)."""
    parts = _binary_parts(a, b)
    if parts is None:
        return np.where(mask, np.asarray(a, dtype=np.float64),
                        np.asarray(b, dtype=np.float64))
    t, pa, da, pb, db = parts
    return DualVector(where(mask, pa, pb), where(mask, da, db), t)


def concat(parts: Sequence[Value]) -> Value:
    """Concatenate 1-d values."""
    t = max(_tag_of(p) for p in parts)
    if t == 0:
        return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts])
    return DualVector(concat([primal_at(p, t) for p in parts]),
                      concat([tangent_at(p, t) for p in parts]), t)


def stack(parts: Sequence[Value]) -> Value:
    """Stack scalars into a 1-d value."""
    t = max(_tag_of(p) for p in parts)
    if t == 0:
        return np.stack([np.asarray(p, dtype=np.float64) for p in parts])
    return DualVector(stack([primal_at(p, t) for p in parts]),
                      stack([tangent_at(p, t) for p in parts]), t)


def reshape(a: Value, shape) -> Value:
    if not isinstance(a, DualVector):
        return np.reshape(np.asarray(a, dtype=np.float64), shape)
    return DualVector(reshape(a.primal, shape), reshape(a.tangent, shape), a.tag)


def transpose(a: Value) -> Value:
    if not isinstance(a, DualVector):
        return np.asarray(a, dtype=np.float64).T
    return DualVector(transpose(a.primal), transpose(a.tangent), a.tag)


# ---------------------------------------------------------------------------
# Function records


@dataclass
class DiffFn2:
    """A differentiable two-argument vector function fn(x, theta).

    Attributes
    ----------
    eval : callable
        Maps (x, theta) to a length-``dim_out`` vector. Must be written
        in terms of the primitives of this module so dual inputs
        propagate (plain numpy suffices when only user closures are used).
    dim_x, dim_theta, dim_out : int
        Argument and output lengths.
    jvp : callable, optional
        ``jvp(x, theta, vx, vtheta)`` returning the directional
        derivative along (vx, vtheta). Used in place of dual propagation
        when supplied; must match it within 1e-8 (``check_user_closures``).
    vjp : callable, optional
        ``vjp(x, theta, w)`` returning the pair ``(d1^T w, d2^T w)``.
    """

    eval: Callable
    dim_x: int
    dim_theta: int
    dim_out: int
    jvp: Optional[Callable] = None
    vjp: Optional[Callable] = None


@dataclass
class ScalarFn2:
    """A twice-differentiable scalar objective f(x, theta).

    ``grad``, when supplied, must return the gradient in x and accept
    dual inputs in either argument, since second-order products are
    formed by differentiating through it; without it the gradient is
    assembled from ``dim_x`` forward passes through ``eval``.
    """

    eval: Callable
    dim_x: int
    dim_theta: int
    grad: Optional[Callable] = None


def _check_len(name: str, v, expected: int) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] != expected:
        raise ValueError(f"{name} must be a vector of length {expected}, "
                         f"got shape {arr.shape}")
    return arr


# ---------------------------------------------------------------------------
# JVP / VJP / second-order products


def jvp_x(fn: DiffFn2, x, theta, v) -> np.ndarray:
    """Directional derivative of fn in its first argument: d1 fn(x, theta) v."""
    v = _check_len("v", v, fn.dim_x)
    if fn.jvp is not None:
        return np.asarray(fn.jvp(x, theta, v, np.zeros(fn.dim_theta)),
                          dtype=np.float64)
    tag = fresh_tag()
    out = fn.eval(DualVector(np.asarray(x, dtype=np.float64), v, tag), theta)
    return np.asarray(deep_primal(tangent_at(out, tag)))


def jvp_theta(fn: DiffFn2, x, theta, w) -> np.ndarray:
    """Directional derivative in the second argument: d2 fn(x, theta) w."""
    w = _check_len("w", w, fn.dim_theta)
    if fn.jvp is not None:
        return np.asarray(fn.jvp(x, theta, np.zeros(fn.dim_x), w),
                          dtype=np.float64)
    tag = fresh_tag()
    out = fn.eval(x, DualVector(np.asarray(theta, dtype=np.float64), w, tag))
    return np.asarray(deep_primal(tangent_at(out, tag)))


def vjp_x(fn: DiffFn2, x, theta, w) -> np.ndarray:
    """Transpose product [d1 fn(x, theta)]^T w.

    Uses the user closure when present; otherwise materializes the
    partial Jacobian column by column with ``dim_x`` forward passes.
    """
    w = _check_len("w", w, fn.dim_out)
    if fn.vjp is not None:
        out_x, _ = fn.vjp(x, theta, w)
        return np.asarray(out_x, dtype=np.float64)
    cols = np.empty((fn.dim_out, fn.dim_x))
    e = np.zeros(fn.dim_x)
    for j in range(fn.dim_x):
        e[j] = 1.0
        cols[:, j] = jvp_x(fn, x, theta, e)
        e[j] = 0.0
    return cols.T @ w


def vjp_x_value(fn: DiffFn2, x: Value, theta: Value, w: Value) -> Value:
    """Transpose product [d1 fn(x, theta)]^T w at a possibly-dual point.

    Component j is the derivative of <fn(x, theta), w> along e_j, so the
    result is built from ``dim_x`` forward passes and stays dual when any
    argument carries a tangent.  The user closure is only trusted with
    plain inputs.
    """
    if (fn.vjp is not None
            and not isinstance(x, DualVector)
            and not isinstance(theta, DualVector)
            and not isinstance(w, DualVector)):
        out_x, _ = fn.vjp(x, theta, w)
        return np.asarray(out_x, dtype=np.float64)
    comps = []
    e = np.zeros(fn.dim_x)
    for j in range(fn.dim_x):
        tag = fresh_tag()
        e[j] = 1.0
        y = fn.eval(DualVector(x, e.copy(), tag), theta)
        e[j] = 0.0
        comps.append(tangent_at(dot(y, w), tag))
    return stack(comps)


def grad_value(fn: ScalarFn2, x: Value, theta: Value) -> Value:
    """Gradient in x at a possibly-dual point (stays dual for nesting)."""
    if fn.grad is not None:
        return fn.grad(x, theta)
    comps = []
    e = np.zeros(fn.dim_x)
    for j in range(fn.dim_x):
        tag = fresh_tag()
        e[j] = 1.0
        y = fn.eval(DualVector(x, e.copy(), tag), theta)
        e[j] = 0.0
        comps.append(tangent_at(y, tag))
    return stack(comps)


def grad_x(fn: ScalarFn2, x, theta) -> np.ndarray:
    """Gradient of f in its first argument."""
    x = _check_len("x", x, fn.dim_x)
    return np.asarray(deep_primal(grad_value(fn, x, theta)))


def hvp_x(fn: ScalarFn2, x, theta, v) -> np.ndarray:
    """Hessian-vector product in x, by differentiating the gradient."""
    v = _check_len("v", v, fn.dim_x)
    tag = fresh_tag()
    g = grad_value(fn, DualVector(np.asarray(x, dtype=np.float64), v, tag),
                   theta)
    return np.asarray(deep_primal(tangent_at(g, tag)))


def cross_jvp(fn: ScalarFn2, x, theta, w) -> np.ndarray:
    """Mixed product d2 (grad_x f)(x, theta) w."""
    w = _check_len("w", w, fn.dim_theta)
    tag = fresh_tag()
    g = grad_value(fn, x,
                   DualVector(np.asarray(theta, dtype=np.float64), w, tag))
    return np.asarray(deep_primal(tangent_at(g, tag)))


# ---------------------------------------------------------------------------
# Finite differences and closure validation


def finite_diff_jacobian(fn: Callable, at, h: float) -> np.ndarray:
    """Central-difference Jacobian, column j = (fn(at+h e_j) - fn(at-h e_j)) / 2h."""
    if h <= 0.0:
        raise ValueError("step size h must be positive")
    at = np.asarray(at, dtype=np.float64)
    d = at.shape[0]
    probe = np.asarray(fn(at), dtype=np.float64)
    jac = np.empty((probe.shape[0], d))
    e = np.zeros(d)
    for j in range(d):
        e[j] = h
        jac[:, j] = (np.asarray(fn(at + e), dtype=np.float64)
                     - np.asarray(fn(at - e), dtype=np.float64)) / (2.0 * h)
        e[j] = 0.0
    return jac


def _jvp_dual(fn: DiffFn2, x, theta, vx, vtheta) -> np.ndarray:
    """Dual-propagation JVP along a joint direction, bypassing user closures."""
    tag = fresh_tag()
    out = fn.eval(DualVector(np.asarray(x, dtype=np.float64), vx, tag),
                  DualVector(np.asarray(theta, dtype=np.float64), vtheta, tag))
    return np.asarray(deep_primal(tangent_at(out, tag)))


def check_user_closures(fn: DiffFn2, x, theta, samples: int = 3,
                        tol: float = 1e-8, seed: int = 0) -> None:
    """Verify user jvp/vjp closures against dual propagation at (x, theta).

    Raises ValueError when any sampled direction disagrees beyond ``tol``
    (relative to the larger of 1 and the reference magnitude).
    """
    rng = np.random.default_rng(seed)
    for _ in range(samples):
        vx = rng.standard_normal(fn.dim_x)
        vt = rng.standard_normal(fn.dim_theta)
        ref = _jvp_dual(fn, x, theta, vx, vt)
        if fn.jvp is not None:
            got = np.asarray(fn.jvp(x, theta, vx, vt), dtype=np.float64)
            err = float(np.max(np.abs(got - ref)))
            if err > tol * max(1.0, float(np.max(np.abs(ref)))):
                raise ValueError(f"user jvp disagrees with dual propagation "
                                 f"by {err:.3e}")
        if fn.vjp is not None:
            w = rng.standard_normal(fn.dim_out)
            got_x, got_t = fn.vjp(x, theta, w)
            # <w, J (vx, vt)> must equal <(vjp_x, vjp_t), (vx, vt)>.
            lhs = float(w @ ref)
            rhs = float(np.asarray(got_x) @ vx + np.asarray(got_t) @ vt)
            if abs(lhs - rhs) > tol * max(1.0, abs(lhs)):
                raise ValueError(f"user vjp disagrees with dual propagation "
                                 f"by {abs(lhs - rhs):.3e}")


def check_gradient(fn: ScalarFn2, x, theta, samples: int = 3,
                   tol: float = 1e-8, seed: int = 0) -> None:
    """Verify a user gradient closure against forward passes through eval."""
    if fn.grad is None:
        return
    bare = ScalarFn2(eval=fn.eval, dim_x=fn.dim_x, dim_theta=fn.dim_theta)
    ref = grad_x(bare, x, theta)
    got = grad_x(fn, x, theta)
    err = float(np.max(np.abs(got - ref)))
    if err > tol * max(1.0, float(np.max(np.abs(ref)))):
        raise ValueError(f"user gradient disagrees with dual propagation "
                         f"by {err:.3e}")
    rng = np.random.default_rng(seed)
    for _ in range(samples):
        v = rng.standard_normal(fn.dim_x)
        hv_ref = hvp_x(bare, x, theta, v)
        hv_got = hvp_x(fn, x, theta, v)
        err = float(np.max(np.abs(hv_got - hv_ref)))
        if err > tol * max(1.0, float(np.max(np.abs(hv_ref)))):
            raise ValueError(f"user gradient's Hessian products disagree "
                             f"by {err:.3e}")

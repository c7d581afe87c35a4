"""Homogeneous quadratic polynomials on R^3 and their canonical decomposition.

A form p(x) = x^T M x is stored through its symmetric coefficient matrix M.
Every trace-free form can be written as

    p(x) = sign * tau * p_delta(Q x),
    p_delta(y) = (1/2 + delta) y1^2 + (1/2 - delta) y2^2 - y3^2,

with delta in [0, 1/2], tau >= 0 the sup-norm over the unit ball, and Q a
proper rotation whose rows are the principal axes.  delta = 0 is the
axisymmetric cone profile, delta = 1/2 the cross profile y1^2 - y3^2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class ZeroForm(ValueError):
    """The trace-free part is numerically zero; no canonical shape exists."""


class NotOrthogonal(ValueError):
    """A matrix passed as a rotation is not orthogonal."""


_TWO_PI_3 = 2.0 * math.pi / 3.0


def _det3(a: np.ndarray) -> float:
    return (
        a[0, 0] * (a[1, 1] * a[2, 2] - a[1, 2] * a[2, 1])
        - a[0, 1] * (a[1, 0] * a[2, 2] - a[1, 2] * a[2, 0])
        + a[0, 2] * (a[1, 0] * a[2, 1] - a[1, 1] * a[2, 0])
    )


def _charpoly_newton(b: np.ndarray, lam: float) -> float:
    # One Newton step on f(t) = det(B - tI); skipped near multiple roots
    # where f' vanishes and the step would be garbage.
    c2 = b[0, 0] + b[1, 1] + b[2, 2]
    c1 = (
        b[0, 0] * b[1, 1] - b[0, 1] ** 2
        + b[0, 0] * b[2, 2] - b[0, 2] ** 2
        + b[1, 1] * b[2, 2] - b[1, 2] ** 2
    )
    c0 = _det3(b)
    f = -lam ** 3 + c2 * lam ** 2 - c1 * lam + c0
    fp = -3.0 * lam ** 2 + 2.0 * c2 * lam - c1
    if abs(fp) < 1e-12:
        return lam
    return lam - f / fp


def _unit_sign(v: np.ndarray) -> np.ndarray:
    n = math.sqrt(float(v @ v))
    v = v / n
    if v[int(np.argmax(np.abs(v)))] < 0.0:
        v = -v
    return v


def _cross3(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.array([a[1] * b[2] - a[2] * b[1],
                     a[2] * b[0] - a[0] * b[2],
                     a[0] * b[1] - a[1] * b[0]])


def eigh3x3(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form eigendecomposition of a symmetric 3x3 matrix.

    Trigonometric eigenvalues (with one Newton polish step each on the
    characteristic polynomial), eigenvectors by cross products of the rows
    of the most isolated shifted matrix plus a 2x2 reduction for the
    remaining pair.  Deterministic; no LAPACK.

    Returns
    -------
    w : (3,) eigenvalues in descending order.
    r : (3, 3) proper-orthogonal matrix, rows are the matching eigenvectors
        (so m = r.T @ diag(w) @ r).
    """
    a = np.asarray(m, dtype=float)
    scale = float(np.max(np.abs(a)))
    if scale == 0.0 or not math.isfinite(scale):
        return np.zeros(3), np.eye(3)
    b = a / scale

    q = (b[0, 0] + b[1, 1] + b[2, 2]) / 3.0
    c = b - q * np.eye(3)
    p2 = float(np.sum(c * c)) / 6.0
    if p2 < 1e-30:
        return np.full(3, q) * scale, np.eye(3)
    p = math.sqrt(p2)
    half_det = _det3(c / p) / 2.0
    half_det = min(1.0, max(-1.0, half_det))
    phi = math.acos(half_det) / 3.0
    w1 = q + 2.0 * p * math.cos(phi)
    w3 = q + 2.0 * p * math.cos(phi + _TWO_PI_3)
    w2 = 3.0 * q - w1 - w3
    w = np.array([_charpoly_newton(b, t) for t in (w1, w2, w3)])
    w.sort()
    w = w[::-1]

    # Most isolated eigenvalue first: its eigenvector is well conditioned.
    gap_top = w[0] - w[1]
    gap_bot = w[1] - w[2]
    iso = 0 if gap_top >= gap_bot else 2

    shifted = b - w[iso] * np.eye(3)
    # np.cross carries heavy axis bookkeeping for 3-vectors; spell it out
    crosses = [_cross3(shifted[0], shifted[1]),
               _cross3(shifted[0], shifted[2]),
               _cross3(shifted[1], shifted[2])]
    norms = [float(v @ v) for v in crosses]
    best = int(np.argmax(norms))
    if norms[best] <= 0.0:
        # fully degenerate in this direction: any axis works
        v_iso = np.eye(3)[0]
    else:
        v_iso = _unit_sign(crosses[best])

    # Orthonormal completion and 2x2 reduction for the remaining pair.
    axis = int(np.argmin(np.abs(v_iso)))
    u = np.eye(3)[axis] - v_iso[axis] * v_iso
    u = u / math.sqrt(float(u @ u))
    v = _cross3(v_iso, u)
    baa = float(u @ b @ u)
    bab = float(u @ b @ v)
    bbb = float(v @ b @ v)
    theta = 0.5 * math.atan2(2.0 * bab, baa - bbb)
    e_hi = math.cos(theta) * u + math.sin(theta) * v
    e_lo = -math.sin(theta) * u + math.cos(theta) * v
    e_hi = _unit_sign(e_hi)
    e_lo = _unit_sign(e_lo)

    if iso == 0:
        rows = np.vstack([v_iso, e_hi, e_lo])
    else:
        rows = np.vstack([e_hi, e_lo, v_iso])
    if _det3(rows) < 0.0:
        rows[1] = -rows[1]
    return w * scale, rows


@dataclass(frozen=True, eq=False)
class QuadraticForm:
    """p(x) = x^T m x with m symmetric 3x3."""

    m: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.m, dtype=float)
        if a.shape != (3, 3):
            raise ValueError(f"expected 3x3 coefficient matrix, got {a.shape}")
        skew = float(np.max(np.abs(a - a.T)))
        if skew > 1e-9 * max(1.0, float(np.max(np.abs(a)))):
            raise ValueError("coefficient matrix is not symmetric")
        sym = 0.5 * (a + a.T)
        sym.flags.writeable = False
        object.__setattr__(self, "m", sym)

    @staticmethod
    def from_coeffs(m11: float, m22: float, m33: float,
                    m12: float, m13: float, m23: float) -> QuadraticForm:
        return QuadraticForm(np.array([
            [m11, m12, m13],
            [m12, m22, m23],
            [m13, m23, m33],
        ]))

    @staticmethod
    def zero() -> QuadraticForm:
        return QuadraticForm(np.zeros((3, 3)))

    def __call__(self, x) -> np.ndarray | float:
        """Evaluate p at one point or a batch of points (..., 3)."""
        pts = np.asarray(x, dtype=float)
        out = np.einsum("...i,ij,...j->...", pts, self.m, pts)
        return float(out) if out.ndim == 0 else out

    def trace(self) -> float:
        return float(np.trace(self.m))

    def trace_free(self) -> QuadraticForm:
        return QuadraticForm(self.m - (self.trace() / 3.0) * np.eye(3))

    def sup_norm(self) -> float:
        """max over the closed unit ball of |p| = spectral radius of m."""
        w, _ = eigh3x3(self.m)
        return float(np.max(np.abs(w)))

    def to_row(self) -> tuple[float, ...]:
        """CSV layout: m11, m22, m33, m12, m13, m23."""
        m = self.m
        return (m[0, 0], m[1, 1], m[2, 2], m[0, 1], m[0, 2], m[1, 2])

    @staticmethod
    def from_row(row) -> QuadraticForm:
        m11, m22, m33, m12, m13, m23 = (float(v) for v in row)
        return QuadraticForm.from_coeffs(m11, m22, m33, m12, m13, m23)

    # Forms live in a vector space; the dynamics needs the arithmetic.
    def __add__(self, other: QuadraticForm) -> QuadraticForm:
        return QuadraticForm(self.m + other.m)

    def __sub__(self, other: QuadraticForm) -> QuadraticForm:
        return QuadraticForm(self.m - other.m)

    def __mul__(self, s: float) -> QuadraticForm:
        return QuadraticForm(self.m * float(s))

    __rmul__ = __mul__

    def __neg__(self) -> QuadraticForm:
        return QuadraticForm(-self.m)

    def __repr__(self) -> str:
        r = ", ".join(f"{v:.6g}" for v in self.to_row())
        return f"QuadraticForm({r})"


@dataclass(frozen=True, eq=False)
class CanonicalForm:
    """Decomposition p(x) = sign * tau * p_delta(Q x) + (trace_part/3)|x|^2.

    rotation rows are the principal axes: the first row is the + direction
    carrying coefficient (1/2 + delta), the last the - direction.
    """

    sign: int
    delta: float
    rotation: np.ndarray
    tau: float
    trace_part: float

    def profile(self) -> QuadraticForm:
        """The normalized limit shape sign * p_delta(Q x), sup-norm one."""
        d = np.diag([0.5 + self.delta, 0.5 - self.delta, -1.0])
        return QuadraticForm(self.sign * self.rotation.T @ d @ self.rotation)

    def reconstruct(self) -> QuadraticForm:
        return QuadraticForm(
            self.sign * self.tau * (self.rotation.T
                                    @ np.diag([0.5 + self.delta, 0.5 - self.delta, -1.0])
                                    @ self.rotation)
            + (self.trace_part / 3.0) * np.eye(3)
        )

    def to_row(self) -> tuple[float, ...]:
        """CSV layout: sign, delta, tau, q11..q33 row-major."""
        return (float(self.sign), self.delta, self.tau,
                *self.rotation.reshape(-1).tolist())


def diagonal_profile(delta: float, sign: int = 1, tau: float = 1.0) -> QuadraticForm:
    """The diagonal model form sign * tau * [(1/2+delta)x^2 + (1/2-delta)y^2 - z^2]."""
    if not 0.0 <= delta <= 0.5:
        raise ValueError(f"delta must lie in [0, 1/2], got {delta}")
    return QuadraticForm(sign * tau * np.diag([0.5 + delta, 0.5 - delta, -1.0]))


def rotate(P: QuadraticForm, Q: np.ndarray) -> QuadraticForm:
    """The form x -> p(Q x), i.e. coefficient matrix Q^T m Q.

    Q may be any orthogonal matrix (improper ones are allowed; axis swaps
    are useful in tests).
    """
    q = np.asarray(Q, dtype=float)
    if q.shape != (3, 3) or np.max(np.abs(q.T @ q - np.eye(3))) > 1e-10:
        raise NotOrthogonal("Q^T Q != I")
    return QuadraticForm(q.T @ P.m @ q)


def canonicalize(P: QuadraticForm, tol: float | None = None) -> CanonicalForm:
    """Split off the trace and decompose the rest as sign * tau * p_delta(Q.).

    The trace-free part has eigenvalues lam1 >= lam2 >= lam3 summing to
    zero.  If |lam3| >= lam1 the form already opens downward along one axis:
    sign = +1, tau = |lam3|, delta = (lam1 - lam2) / (2 tau).  Otherwise the
    negated form does, and sign = -1.  The tie at delta = 1/2 (spectrum
    proportional to (1, 0, -1), where p and -p are congruent) resolves to
    sign = +1 so classification is deterministic.

    Raises ZeroForm when tau < tol (default 1e-10 * max(1, largest entry)).
    """
    t = P.trace()
    c = P.m - (t / 3.0) * np.eye(3)
    if tol is None:
        tol = 1e-10 * max(1.0, float(np.max(np.abs(P.m))))
    w, r = eigh3x3(c)
    lam1, lam2, lam3 = (float(v) for v in w)
    if abs(lam3) >= lam1:
        sign = 1
        tau = abs(lam3)
        top, mid = lam1, lam2
        rows = r.copy()
    else:
        sign = -1
        tau = lam1
        top, mid = -lam3, -lam2
        rows = r[::-1].copy()
    if tau < tol:
        raise ZeroForm(f"trace-free part has amplitude {tau:.3e} < tol {tol:.3e}")
    delta = min(0.5, max(0.0, (top - mid) / (2.0 * tau)))
    if _det3(rows) < 0.0:
        rows[1] = -rows[1]
    rows.flags.writeable = False
    return CanonicalForm(sign=sign, delta=delta, rotation=rows,
                         tau=tau, trace_part=t)


def sup_distance(P1: QuadraticForm, P2: QuadraticForm) -> float:
    """sup over the unit ball of |p1 - p2|."""
    return (P1 - P2).sup_norm()


def random_form(rng: np.random.Generator, scale: float = 1.0) -> QuadraticForm:
    """A random symmetric form with independent normal entries (test helper)."""
    a = rng.normal(size=(3, 3)) * scale
    return QuadraticForm(0.5 * (a + a.T))

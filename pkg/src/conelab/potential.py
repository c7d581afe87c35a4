"""Log-potentials of quadratic positivity sets and their coefficient functions.

For a nonzero quadratic form P, let sigma = -chi_{P>0} restricted to the unit
sphere and extended 0-homogeneously.  The potential built here is the unique
solution of

    Delta Z = amplitude * sigma,     Z(0) = |grad Z(0)| = 0,

growing slower than |x|^2 log-free at infinity, namely

    Z(x) = amplitude * [ (1/5) S2(x) (ln|x| - 1/5)
                         + |x|^2 sum_{l != 2} c_{l,m} / ((2-l)(3+l)) Y_{l,m}(x/|x|) ]

where S2 is the 2-homogeneous harmonic extension of sigma's degree-2 part and
c_{l,m} its remaining spherical-harmonic coefficients.  The -1/5 shift makes
the quadratic ball-projection of Z vanish at radius 1 (in the trace-free
sense), so the projection at radius r is exactly amplitude*(ln r/5)*S2.

Everything is computed by an exact band reduction instead of node quadrature:
in the canonical frame {P > 0} meets each meridian phi = const in
|cos theta| < c(phi) (or its complement), with c closed-form, so the polar
integrals are analytic and only the azimuth integral is numerical -- split at
the angles where the band pinches off and Gauss-Legendre'd per smooth arc,
which converges spectrally.  Golden values at delta in {0, 1/2} come out to
machine precision at the default level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator

import numpy as np
from numpy.polynomial.legendre import leggauss


@lru_cache(maxsize=64)
def _gl01(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights on [0, 1], cached (read-only)."""
    xg, wg = leggauss(n)
    t = 0.5 * (xg + 1.0)
    w = 0.5 * wg
    t.setflags(write=False)
    w.setflags(write=False)
    return t, w

from conelab.quadform import QuadraticForm, canonicalize, diagonal_profile
from conelab.sphere import HarmonicExpansion, sh_index

FOUR_PI = 4.0 * math.pi
_SQRT_4PI = math.sqrt(FOUR_PI)


class OriginDerivative(ValueError):
    """Derivatives of the potential are singular at the origin (log term)."""


@dataclass(frozen=True)
class IndicatorMoments:
    """Surface integrals of -chi_{p_delta > 0} against x^2, y^2, z^2 and 1.

    mx + my + mz = total identically (x^2+y^2+z^2 = 1 on the sphere); all
    four are <= 0 and total >= -4 pi.  kappa is the asymmetry coefficient
    (1+2d)(3 my - total)/(3 mx - total) - 1 + 2d driving the delta-dynamics.
    """

    delta: float
    mx: float
    my: float
    mz: float
    total: float
    kappa: float


# ---------------------------------------------------------------------------
# band geometry and adapted azimuth quadrature

def _band_halfwidth(delta: float, lam: float, phi: np.ndarray) -> np.ndarray:
    """Half-width c(phi) in u = cos(theta) of {p_delta > lam} on a meridian.

    p_delta on the sphere is g(phi)(1-u^2) - u^2 with g = 1/2 + delta cos 2phi,
    so p_delta > lam iff u^2 < (g - lam)/(1 + g), clipped to [0, 1].
    """
    g = 0.5 + delta * np.cos(2.0 * phi)
    c2 = (g - lam) / (1.0 + g)
    return np.sqrt(np.clip(c2, 0.0, 1.0))


def _azimuth_nodes(delta: float, lam: float, level: int) -> tuple[np.ndarray, np.ndarray]:
    """Quadrature for int_0^{2pi} F(c(phi), phi) dphi with smooth F.

    c is analytic except where g(phi) = lam (the band pinches off): the
    circle is split there (and at the axis extrema, which keeps every arc
    short), and on arcs ending at a pinch-off a sqrt substitution absorbs
    the |phi - phi*|^(1/2) behaviour, so plain Gauss-Legendre per arc is
    spectrally accurate.
    """
    n = max(24, level // 2)
    t01, w01 = _gl01(n)

    two_pi = 2.0 * math.pi
    breaks = {0.0, 0.5 * math.pi, math.pi, 1.5 * math.pi, two_pi}
    hard: list[float] = []
    if delta > 0.0:
        v = (lam - 0.5) / delta
        if -1.0 <= v <= 1.0:
            a = 0.5 * math.acos(v)
            for t in (a, math.pi - a, math.pi + a, two_pi - a):
                hard.append(t % two_pi)
                breaks.add(t % two_pi)
    if 0.0 in (h % two_pi for h in hard):
        hard.append(two_pi)

    def is_hard(t: float) -> bool:
        return any(abs(t - h) < 1e-12 for h in hard)

    bs = sorted(breaks)
    phis = []
    ws = []
    for a, b in zip(bs[:-1], bs[1:]):
        if b - a < 1e-12:
            continue
        segs: list[tuple[float, float, bool, bool]]
        if is_hard(a) and is_hard(b):
            mid = 0.5 * (a + b)
            segs = [(a, mid, True, False), (mid, b, False, True)]
        else:
            segs = [(a, b, is_hard(a), is_hard(b))]
        for s0, s1, left, right in segs:
            span = s1 - s0
            if left:
                phis.append(s0 + span * t01 * t01)
                ws.append(w01 * 2.0 * span * t01)
            elif right:
                phis.append(s1 - span * t01 * t01)
                ws.append(w01 * 2.0 * span * t01)
            else:
                phis.append(s0 + span * t01)
                ws.append(w01 * span)
    return np.concatenate(phis), np.concatenate(ws)


def _band_moments(delta: float, lam: float, level: int) -> tuple[float, float, float, float]:
    """(Bx, By, Bz, B1): integrals of x^2, y^2, z^2, 1 over the band on S^2."""
    phi, w = _azimuth_nodes(delta, lam, level)
    c = _band_halfwidth(delta, lam, phi)
    i1 = 2.0 * c                    # int_{-c}^{c} du
    i3 = 2.0 * c ** 3 / 3.0         # int u^2 du
    ixy = i1 - i3                   # int (1 - u^2) du
    bx = float(w @ (np.cos(phi) ** 2 * ixy))
    by = float(w @ (np.sin(phi) ** 2 * ixy))
    bz = float(w @ i3)
    b1 = float(w @ i1)
    return bx, by, bz, b1


def _source_moments(sign: int, delta: float, lam: float,
                    level: int) -> tuple[float, float, float, float]:
    """Integrals of sigma = -chi_{P>0} against x^2, y^2, z^2, 1 (canonical frame)."""
    bx, by, bz, b1 = _band_moments(delta, lam, level)
    if sign > 0:
        return -bx, -by, -bz, -b1
    third = FOUR_PI / 3.0
    return bx - third, by - third, bz - third, b1 - FOUR_PI


def indicator_moments(delta: float, level: int = 64) -> IndicatorMoments:
    """The moment table for the model profile p_delta (trace-free, + sign)."""
    if not 0.0 <= delta <= 0.5:
        raise ValueError(f"delta must lie in [0, 1/2], got {delta}")
    ax, ay, az, a = _source_moments(1, delta, 0.0, level)
    dx = 3.0 * ax - a
    dy = 3.0 * ay - a
    k = (1.0 + 2.0 * delta) * dy / dx - 1.0 + 2.0 * delta
    return IndicatorMoments(delta=float(delta), mx=ax, my=ay, mz=az,
                            total=a, kappa=k)


def kappa(delta: float, level: int = 64) -> float:
    """Asymmetry coefficient of the log-form; vanishes at both endpoints."""
    return indicator_moments(delta, level=level).kappa


def _log_form_diag(sign: int, delta: float, lam: float, level: int) -> np.ndarray:
    """Canonical-frame diagonal of S2 = (5/8pi) diag(3A_i - A)."""
    ax, ay, az, a = _source_moments(sign, delta, lam, level)
    return (5.0 / (8.0 * math.pi)) * np.array(
        [3.0 * ax - a, 3.0 * ay - a, 3.0 * az - a])


# ---------------------------------------------------------------------------
# tail coefficients: per-azimuth Gauss-Legendre in u against normalized
# associated Legendre functions

def _pbar_terms(lmax: int, u: np.ndarray) -> Iterator[tuple[int, int, np.ndarray]]:
    """(l, m, Pbar_{l,m}(u)) for 0 <= m <= l <= lmax, fully normalized, no
    Condon-Shortley phase (matches conelab.sphere)."""
    s = np.sqrt(np.clip(1.0 - u * u, 0.0, None))
    pmm = np.full(u.shape, math.sqrt(1.0 / FOUR_PI))
    for m in range(lmax + 1):
        if m > 0:
            pmm = pmm * s * math.sqrt((2.0 * m + 1.0) / (2.0 * m))
        yield m, m, pmm
        if m == lmax:
            break
        p_prev = pmm
        p_cur = u * math.sqrt(2.0 * m + 3.0) * pmm
        yield m + 1, m, p_cur
        for l in range(m + 2, lmax + 1):
            a = math.sqrt((4.0 * l * l - 1.0) / (l * l - m * m))
            b = math.sqrt(((l - 1.0) ** 2 - m * m) / (4.0 * (l - 1.0) ** 2 - 1.0))
            p_prev, p_cur = p_cur, a * (u * p_cur - b * p_prev)
            yield l, m, p_cur


def _band_harmonic_integrals(delta: float, lam: float, lmax: int,
                             level: int) -> np.ndarray:
    """I_{l,m} = int_band Y_{l,m} dS for even l, even m >= 0 (others vanish).

    Flat sh_index layout.  The polar factor int_{-c}^{c} Pbar_{l,m}(u) du is
    2 int_0^c (even integrand) done by Gauss-Legendre exact through degree
    lmax; the azimuth factor is 1 (m = 0) or sqrt(2) cos(m phi).

    The azimuth rule must resolve m <= lmax oscillations per arc, so its
    density scales with lmax regardless of the requested level.
    """
    phi, w = _azimuth_nodes(delta, lam, max(level, 4 * lmax))
    c = _band_halfwidth(delta, lam, phi)
    nu = lmax // 2 + 2
    t01, w01 = _gl01(nu)
    u = np.outer(c, t01).ravel()
    uw = c[:, None] * w01[None, :]

    out = np.zeros((lmax + 1) ** 2)
    nphi = phi.shape[0]
    cos_cache: dict[int, np.ndarray] = {}
    for l, m, pbar in _pbar_terms(lmax, u):
        if l % 2 or m % 2:
            continue
        polar = 2.0 * np.sum(pbar.reshape(nphi, nu) * uw, axis=1)
        if m == 0:
            azim = w @ polar
        else:
            if m not in cos_cache:
                cos_cache[m] = np.cos(m * phi)
            azim = math.sqrt(2.0) * (w @ (cos_cache[m] * polar))
        out[sh_index(l, m)] = azim
    return out


def _tail_expansion(sign: int, delta: float, lam: float, lmax: int,
                    level: int) -> HarmonicExpansion:
    """Expansion of sigma = -chi_{P>0} in the canonical frame, l = 2 zeroed."""
    ints = _band_harmonic_integrals(delta, lam, lmax, level)
    if sign > 0:
        coeffs = -ints
    else:
        coeffs = ints.copy()
        coeffs[sh_index(0, 0)] -= _SQRT_4PI
    coeffs[4:9] = 0.0  # degree-2 block lives in the log form
    return HarmonicExpansion(lmax=lmax, coeffs=coeffs)


# ---------------------------------------------------------------------------
# the potential object

@dataclass(frozen=True, eq=False)
class LogPotential:
    """Evaluable representation of the potential of -chi_{P>0}.

    log_form is S2 in the original frame; tail holds the remaining
    coefficients of sigma in the canonical frame (rows of `rotation` are the
    canonical axes), so evaluation rotates the point first.
    """

    source_form: QuadraticForm
    log_form: QuadraticForm
    tail: HarmonicExpansion
    rotation: np.ndarray
    amplitude: float

    @property
    def lmax(self) -> int:
        return self.tail.lmax


def build_potential(P: QuadraticForm, amplitude: float = 1.0,
                    lmax: int = 40, level: int = 64) -> LogPotential:
    """Construct the potential attached to {P > 0}.

    Raises ZeroForm (from canonicalization) for vanishing trace-free part.
    """
    if amplitude <= 0.0:
        raise ValueError("amplitude must be positive")
    can = canonicalize(P)
    lam = -can.sign * can.trace_part / (3.0 * can.tau)
    dvec = _log_form_diag(can.sign, can.delta, lam, level)
    s2 = QuadraticForm(can.rotation.T @ np.diag(dvec) @ can.rotation)
    tail = _tail_expansion(can.sign, can.delta, lam, lmax, level)
    return LogPotential(source_form=P, log_form=s2, tail=tail,
                        rotation=can.rotation, amplitude=float(amplitude))


def _tail_sum(zp: LogPotential, unit_pts: np.ndarray) -> np.ndarray:
    """sum_{l != 2} c_{l,m}/((2-l)(3+l)) Y_{l,m} at canonical-frame unit points."""
    from conelab.sphere import _ylm_terms

    out = np.zeros(unit_pts.shape[0])
    coeffs = zp.tail.coeffs
    for l, m, ylm in _ylm_terms(zp.tail.lmax, unit_pts):
        c = coeffs[sh_index(l, m)]
        if c != 0.0:
            out += (c / ((2.0 - l) * (3.0 + l))) * ylm
    return out


def eval_potential(zp: LogPotential, x, order: int = 0):
    """Evaluate the potential (order 0), its gradient (1) or Hessian (2).

    Order 0 is analytic.  Derivatives use central differences with steps
    scaled by |x| (the integrand is 2-homogeneous up to logs, so relative
    steps keep the truncation error uniform); they are meaningless at the
    origin, where OriginDerivative is raised.
    """
    pts = np.atleast_2d(np.asarray(x, dtype=float))
    single = np.asarray(x).ndim == 1
    if order == 0:
        val = _eval_value(zp, pts)
        return float(val[0]) if single else val
    r = np.linalg.norm(pts, axis=1)
    if np.any(r < 1e-12):
        raise OriginDerivative("derivatives are singular at the origin")
    if order == 1:
        h = 1e-5 * r
        grad = np.empty_like(pts)
        for i in range(3):
            e = np.zeros(3)
            e[i] = 1.0
            grad[:, i] = (_eval_value(zp, pts + h[:, None] * e)
                          - _eval_value(zp, pts - h[:, None] * e)) / (2.0 * h)
        return grad[0] if single else grad
    if order == 2:
        h = 1e-4 * r
        hess = np.empty((pts.shape[0], 3, 3))
        f0 = _eval_value(zp, pts)
        eye = np.eye(3)
        for i in range(3):
            fp = _eval_value(zp, pts + h[:, None] * eye[i])
            fm = _eval_value(zp, pts - h[:, None] * eye[i])
            hess[:, i, i] = (fp - 2.0 * f0 + fm) / h ** 2
        for i in range(3):
            for j in range(i + 1, 3):
                hij = (_eval_value(zp, pts + h[:, None] * (eye[i] + eye[j]))
                       - _eval_value(zp, pts + h[:, None] * (eye[i] - eye[j]))
                       - _eval_value(zp, pts - h[:, None] * (eye[i] - eye[j]))
                       + _eval_value(zp, pts - h[:, None] * (eye[i] + eye[j]))) / (4.0 * h ** 2)
                hess[:, i, j] = hess[:, j, i] = hij
        return hess[0] if single else hess
    raise ValueError("order must be 0, 1 or 2")


def _eval_value(zp: LogPotential, pts: np.ndarray, chunk: int = 1 << 18) -> np.ndarray:
    out = np.zeros(pts.shape[0])
    for start in range(0, pts.shape[0], chunk):
        blk = pts[start:start + chunk]
        r = np.linalg.norm(blk, axis=1)
        pos = r > 0.0
        if not np.any(pos):
            continue
        b = blk[pos]
        rb = r[pos]
        log_part = (zp.log_form(b)) * (np.log(rb) - 0.2) / 5.0
        unit = (b / rb[:, None]) @ zp.rotation.T
        tail_part = rb ** 2 * _tail_sum(zp, unit)
        vals = np.zeros(blk.shape[0])
        vals[pos] = zp.amplitude * (log_part + tail_part)
        out[start:start + chunk] = vals
    return out


def potential_projection(P: QuadraticForm, r: float,
                         amplitude: float = 1.0, level: int = 64) -> QuadraticForm:
    """The quadratic ball-projection of the potential at radius r.

    Exactly amplitude * (ln r / 5) * S2: the tail terms average to zero in
    the trace-free sense and the log normalization zeroes the r = 1 value.
    """
    if not 0.0 < r <= 1.0:
        raise ValueError(f"radius must lie in (0, 1], got {r}")
    can = canonicalize(P)
    lam = -can.sign * can.trace_part / (3.0 * can.tau)
    dvec = _log_form_diag(can.sign, can.delta, lam, level)
    s2 = can.rotation.T @ np.diag(dvec) @ can.rotation
    return QuadraticForm(amplitude * (math.log(r) / 5.0) * s2)


def growth_margin(C: float = 10.0, delta_grid=None, level: int = 64) -> float:
    """min over the profile family of sup|C p_delta + projection at 1/2| - C.

    A strictly positive value certifies that one dyadic halving grows the
    quadratic amplitude by at least that much, uniformly in delta.  C must
    be large enough that the sup-norm is attained along the profile's own
    axes; C >= 10 is required.
    """
    if C < 10.0:
        raise ValueError("C must be >= 10")
    if delta_grid is None:
        delta_grid = np.linspace(0.0, 0.5, 51)
    worst = math.inf
    for d in np.asarray(delta_grid, dtype=float):
        p = diagonal_profile(float(d))
        bump = potential_projection(p, 0.5, 1.0, level=level)
        excess = (C * p + bump).sup_norm() - C
        worst = min(worst, excess)
    return worst

"""Quadrature and real spherical-harmonic expansions on the unit sphere.

The basis is the real orthonormal one (geodesy convention, no Condon-Shortley
phase):

    Y_{l,0}  = Pbar_{l,0}(cos th)
    Y_{l,m}  = sqrt(2) Pbar_{l,m}(cos th) cos(m ph),   m > 0
    Y_{l,-m} = sqrt(2) Pbar_{l,m}(cos th) sin(m ph),   m > 0

with fully normalized associated Legendre functions Pbar, so that
int Y_{l,m} Y_{l',m'} dS = delta delta.  Low degrees in cartesian form:
Y_{1,1} = sqrt(3/4pi) x, Y_{2,0} = sqrt(5/16pi)(3z^2-1),
Y_{2,2} = sqrt(15/16pi)(x^2-y^2), Y_{2,1} = sqrt(15/4pi) xz, etc.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np
from numpy.polynomial.legendre import leggauss


class NotUnit(ValueError):
    """Point expected on the unit sphere is not on it."""


def sh_index(l: int, m: int) -> int:
    """Position of (l, m) in the flat coefficient layout l*l + l + m."""
    return l * l + l + m


def build_quadrature(level: int) -> "SphereQuadrature":
    """Product quadrature: Gauss-Legendre in cos(theta) x uniform azimuth.

    `level` polar nodes and 2*level azimuth nodes integrate every spherical
    polynomial of degree <= 2*level - 1 exactly.  The node set is symmetric
    under the antipodal map, so odd-parity integrands cancel in pairs.
    """
    if level < 1:
        raise ValueError("level must be >= 1")
    u, wu = leggauss(level)
    nphi = 2 * level
    phi = 2.0 * math.pi * np.arange(nphi) / nphi
    s = np.sqrt(1.0 - u ** 2)
    x = np.outer(s, np.cos(phi)).ravel()
    y = np.outer(s, np.sin(phi)).ravel()
    z = np.outer(u, np.ones(nphi)).ravel()
    nodes = np.column_stack([x, y, z])
    weights = np.repeat(wu, nphi) * (2.0 * math.pi / nphi)
    return SphereQuadrature(nodes=nodes, weights=weights,
                            exact_degree=2 * level - 1, level=level)


@dataclass(frozen=True, eq=False)
class SphereQuadrature:
    nodes: np.ndarray
    weights: np.ndarray
    exact_degree: int
    level: int

    def integrate(self, f: Callable[[np.ndarray], np.ndarray] | np.ndarray) -> float:
        vals = f(self.nodes) if callable(f) else np.asarray(f)
        return float(self.weights @ vals)


def _ylm_terms(lmax: int, pts: np.ndarray) -> Iterator[tuple[int, int, np.ndarray]]:
    """Yield (l, m, Y_{l,m}(pts)) for every 0 <= l <= lmax, -l <= m <= l.

    Memory stays O(npoints): the normalized Legendre recurrences run in place
    and the azimuth factors advance by the angle-addition recurrence.  Points
    must be unit vectors.
    """
    x = pts[..., 0]
    y = pts[..., 1]
    u = pts[..., 2]
    s = np.hypot(x, y)
    safe = np.where(s > 0.0, s, 1.0)
    cphi = np.where(s > 0.0, x / safe, 1.0)
    sphi = np.where(s > 0.0, y / safe, 0.0)

    sqrt2 = math.sqrt(2.0)
    pmm = np.full(u.shape, math.sqrt(1.0 / (4.0 * math.pi)))
    cosm = np.ones_like(u)
    sinm = np.zeros_like(u)
    for m in range(lmax + 1):
        if m > 0:
            pmm = pmm * s * math.sqrt((2.0 * m + 1.0) / (2.0 * m))
            cosm, sinm = cosm * cphi - sinm * sphi, sinm * cphi + cosm * sphi
        if m == 0:
            yield m, 0, pmm.copy()
        else:
            yield m, m, sqrt2 * pmm * cosm
            yield m, -m, sqrt2 * pmm * sinm
        if m == lmax:
            break
        p_prev = pmm
        p_cur = u * math.sqrt(2.0 * m + 3.0) * pmm
        if m == 0:
            yield m + 1, 0, p_cur.copy()
        else:
            yield m + 1, m, sqrt2 * p_cur * cosm
            yield m + 1, -m, sqrt2 * p_cur * sinm
        for l in range(m + 2, lmax + 1):
            a = math.sqrt((4.0 * l * l - 1.0) / (l * l - m * m))
            b = math.sqrt(((l - 1.0) ** 2 - m * m) / (4.0 * (l - 1.0) ** 2 - 1.0))
            p_prev, p_cur = p_cur, a * (u * p_cur - b * p_prev)
            if m == 0:
                yield l, 0, p_cur.copy()
            else:
                yield l, m, sqrt2 * p_cur * cosm
                yield l, -m, sqrt2 * p_cur * sinm


def harmonic_basis(lmax: int, pts: np.ndarray) -> np.ndarray:
    """Dense design matrix Y[i, sh_index(l, m)] at unit points (tests, small lmax)."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    out = np.empty((pts.shape[0], (lmax + 1) ** 2))
    for l, m, vals in _ylm_terms(lmax, pts):
        out[:, sh_index(l, m)] = vals
    return out


@dataclass(frozen=True, eq=False)
class HarmonicExpansion:
    """Coefficients against the real orthonormal basis, flat layout l*l+l+m."""

    lmax: int
    coeffs: np.ndarray

    def coeff(self, l: int, m: int) -> float:
        if not (0 <= l <= self.lmax and -l <= m <= l):
            raise IndexError(f"(l={l}, m={m}) outside expansion range")
        return float(self.coeffs[sh_index(l, m)])

    def degree_slice(self, l: int) -> np.ndarray:
        return self.coeffs[l * l:(l + 1) ** 2]


def expand(f, lmax: int, q: SphereQuadrature) -> HarmonicExpansion:
    """Project f (callable on unit vectors, or node values) onto the basis."""
    vals = f(q.nodes) if callable(f) else np.asarray(f, dtype=float)
    wf = q.weights * vals
    coeffs = np.empty((lmax + 1) ** 2)
    for l, m, ylm in _ylm_terms(lmax, q.nodes):
        coeffs[sh_index(l, m)] = ylm @ wf
    return HarmonicExpansion(lmax=lmax, coeffs=coeffs)


def eval_expansion(e: HarmonicExpansion, x) -> np.ndarray | float:
    """Sum the expansion at unit points.  Raises NotUnit off the sphere."""
    pts = np.atleast_2d(np.asarray(x, dtype=float))
    r = np.linalg.norm(pts, axis=-1)
    if np.max(np.abs(r - 1.0)) > 1e-10:
        raise NotUnit("eval_expansion needs |x| = 1 within 1e-10")
    out = np.zeros(pts.shape[0])
    for l, m, ylm in _ylm_terms(e.lmax, pts):
        c = e.coeffs[sh_index(l, m)]
        if c != 0.0:
            out += c * ylm
    return float(out[0]) if np.asarray(x).ndim == 1 else out


# cartesian coefficient matrices of the five l=2 basis functions
_K20 = math.sqrt(5.0 / (16.0 * math.pi))
_K21 = math.sqrt(15.0 / (4.0 * math.pi))
_K22 = math.sqrt(15.0 / (16.0 * math.pi))


def degree2_form(e: HarmonicExpansion):
    """The trace-free quadratic form whose sphere restriction is the l=2 part.

    Inverse of restriction: a trace-free p(x) = x^T M x restricted to S^2 has
    pure l=2 harmonic content, and this map recovers M from the coefficients.
    """
    from conelab.quadform import QuadraticForm

    if e.lmax < 2:
        raise ValueError("expansion must include degree 2")
    m = np.zeros((3, 3))
    m += e.coeff(2, 0) * _K20 * np.diag([-1.0, -1.0, 2.0])
    m += e.coeff(2, 2) * _K22 * np.diag([1.0, -1.0, 0.0])
    half = 0.5 * _K21
    m[0, 1] = m[1, 0] = e.coeff(2, -2) * half
    m[0, 2] = m[2, 0] = e.coeff(2, 1) * half
    m[1, 2] = m[2, 1] = e.coeff(2, -1) * half
    return QuadraticForm(m)


def form_to_degree2_coeffs(M: np.ndarray) -> np.ndarray:
    """Coefficients (c_{2,-2}..c_{2,2}) of the sphere restriction of a
    trace-free x^T M x; the exact inverse of degree2_form."""
    return np.array([
        2.0 * M[0, 1] / _K21,
        2.0 * M[1, 2] / _K21,
        M[2, 2] / (2.0 * _K20),
        2.0 * M[0, 2] / _K21,
        (M[0, 0] - M[1, 1]) / (2.0 * _K22),
    ])

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from conelab.quadform import diagonal_profile, random_form, rotate, sup_distance
from conelab.sphere import (
    HarmonicExpansion,
    NotUnit,
    build_quadrature,
    degree2_form,
    eval_expansion,
    expand,
    form_to_degree2_coeffs,
    harmonic_basis,
    sh_index,
)

FOUR_PI = 4.0 * math.pi


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def test_weights_sum_to_sphere_area():
    for level in (1, 2, 5, 16, 64):
        q = build_quadrature(level)
        assert abs(np.sum(q.weights) - FOUR_PI) < 1e-12 * FOUR_PI
        assert np.all(q.weights > 0)
        assert_allclose(np.linalg.norm(q.nodes, axis=1), 1.0, atol=1e-14)


def test_monomial_moments():
    q = build_quadrature(16)
    assert q.integrate(lambda v: v[:, 2] ** 2) == pytest.approx(FOUR_PI / 3, abs=1e-12)
    assert q.integrate(lambda v: v[:, 0] ** 2 * v[:, 1] ** 2) == pytest.approx(
        FOUR_PI / 15, abs=1e-12)
    # odd moments cancel exactly by node symmetry
    assert q.integrate(lambda v: v[:, 0] * v[:, 2] ** 2) == pytest.approx(0.0, abs=1e-13)


def test_exactness_up_to_declared_degree():
    # all monomials x^a y^b z^c with a+b+c <= exact_degree, against the
    # closed-form sphere moments
    level = 6
    q = build_quadrature(level)

    def moment(a, b, c):
        if a % 2 or b % 2 or c % 2:
            return 0.0
        num = (math.gamma((a + 1) / 2) * math.gamma((b + 1) / 2)
               * math.gamma((c + 1) / 2))
        return 2.0 * num / math.gamma((a + b + c + 3) / 2)

    for a in range(0, q.exact_degree + 1):
        for b in range(0, q.exact_degree + 1 - a):
            for c in range(0, q.exact_degree + 1 - a - b):
                got = q.integrate(
                    q.nodes[:, 0] ** a * q.nodes[:, 1] ** b * q.nodes[:, 2] ** c)
                assert abs(got - moment(a, b, c)) < 1e-10


def test_basis_orthonormal():
    lmax = 6
    q = build_quadrature(lmax + 1)  # exact through degree 2*lmax+1
    y = harmonic_basis(lmax, q.nodes)
    gram = y.T @ (q.weights[:, None] * y)
    assert_allclose(gram, np.eye((lmax + 1) ** 2), atol=1e-12)


def test_low_degree_cartesian_forms():
    rng = np.random.default_rng(2)
    v = rng.normal(size=(40, 3))
    v /= np.linalg.norm(v, axis=1)[:, None]
    x, y, z = v[:, 0], v[:, 1], v[:, 2]
    ybas = harmonic_basis(2, v)
    assert_allclose(ybas[:, sh_index(0, 0)], math.sqrt(1 / FOUR_PI), atol=1e-14)
    assert_allclose(ybas[:, sh_index(1, 1)], math.sqrt(3 / FOUR_PI) * x, atol=1e-13)
    assert_allclose(ybas[:, sh_index(1, -1)], math.sqrt(3 / FOUR_PI) * y, atol=1e-13)
    assert_allclose(ybas[:, sh_index(1, 0)], math.sqrt(3 / FOUR_PI) * z, atol=1e-13)
    assert_allclose(ybas[:, sh_index(2, 0)],
                    math.sqrt(5 / (16 * math.pi)) * (3 * z ** 2 - 1), atol=1e-13)
    assert_allclose(ybas[:, sh_index(2, 2)],
                    math.sqrt(15 / (16 * math.pi)) * (x ** 2 - y ** 2), atol=1e-13)
    assert_allclose(ybas[:, sh_index(2, 1)],
                    math.sqrt(15 / FOUR_PI) * x * z, atol=1e-13)
    assert_allclose(ybas[:, sh_index(2, -1)],
                    math.sqrt(15 / FOUR_PI) * y * z, atol=1e-13)
    assert_allclose(ybas[:, sh_index(2, -2)],
                    math.sqrt(15 / FOUR_PI) * x * y, atol=1e-13)


def test_expand_constant():
    q = build_quadrature(8)
    e = expand(lambda v: np.ones(len(v)), lmax=4, q=q)
    assert e.coeff(0, 0) == pytest.approx(math.sqrt(FOUR_PI), abs=1e-12)
    rest = np.delete(e.coeffs, sh_index(0, 0))
    assert np.max(np.abs(rest)) < 1e-12


def test_expand_z_squared():
    q = build_quadrature(8)
    e = expand(lambda v: v[:, 2] ** 2, lmax=4, q=q)
    assert e.coeff(0, 0) == pytest.approx((FOUR_PI / 3) / math.sqrt(FOUR_PI), abs=1e-12)
    assert e.coeff(2, 0) == pytest.approx((4.0 / 3.0) * math.sqrt(math.pi / 5), abs=1e-12)
    # parseval for a function with only l in {0, 2}
    assert np.sum(e.coeffs ** 2) == pytest.approx(FOUR_PI / 5, abs=1e-12)


def test_eval_expansion_round_trip():
    rng = np.random.default_rng(4)
    q = build_quadrature(12)
    coeffs = np.zeros(36)
    coeffs[:25] = rng.normal(size=25)  # harmonic degree <= 4
    f = HarmonicExpansion(lmax=5, coeffs=coeffs)
    pts = rng.normal(size=(100, 3))
    pts /= np.linalg.norm(pts, axis=1)[:, None]
    target = eval_expansion(f, pts)
    e = expand(lambda v: eval_expansion(f, v), lmax=5, q=q)
    assert_allclose(eval_expansion(e, pts), target, atol=1e-8)


def test_eval_expansion_requires_unit():
    e = HarmonicExpansion(lmax=1, coeffs=np.zeros(4))
    with pytest.raises(NotUnit):
        eval_expansion(e, np.array([0.5, 0.0, 0.0]))


def test_expand_indicator_gibbs_bounded():
    # truncated indicator overshoot at the north pole stays bounded
    q = build_quadrature(64)
    p0 = diagonal_profile(0.0)
    e = expand(lambda v: -(p0(v) > 0).astype(float), lmax=40, q=q)
    val = eval_expansion(e, np.array([0.0, 0.0, 1.0]))
    assert abs(val) < 0.6


def test_degree2_form_examples():
    q = build_quadrature(8)
    e = expand(lambda v: 3 * v[:, 2] ** 2 - 1, lmax=4, q=q)
    assert_allclose(degree2_form(e).m, np.diag([-1.0, -1.0, 2.0]), atol=1e-12)
    e = expand(lambda v: v[:, 0] * v[:, 1], lmax=4, q=q)
    m = degree2_form(e).m
    assert m[0, 1] == pytest.approx(0.5, abs=1e-12)
    assert np.max(np.abs(m - np.array([[0, 0.5, 0], [0.5, 0, 0], [0, 0, 0]]))) < 1e-12


def test_degree2_form_inverts_restriction():
    rng = np.random.default_rng(11)
    q = build_quadrature(8)
    for _ in range(10):
        P = random_form(rng).trace_free()
        e = expand(lambda v: P(v), lmax=4, q=q)
        assert sup_distance(degree2_form(e), P) < 1e-10
        assert_allclose(form_to_degree2_coeffs(P.m), e.degree_slice(2), atol=1e-10)


def test_degree2_rotation_covariance():
    rng = np.random.default_rng(12)
    q = build_quadrature(16)

    def f(v):
        return v[:, 0] ** 2 * v[:, 2] - 0.3 * v[:, 1] + np.cos(v[:, 0] + v[:, 2])

    base = degree2_form(expand(f, lmax=6, q=q))
    for _ in range(10):
        rot = random_rotation(rng)
        e_rot = expand(lambda v: f(v @ rot.T), lmax=6, q=q)
        assert sup_distance(degree2_form(e_rot), rotate(base, rot)) < 1e-8


def test_indicator_parity():
    # chi_{P>0} is an even set, so odd-l coefficients vanish
    rng = np.random.default_rng(13)
    q = build_quadrature(64)
    for _ in range(5):
        P = random_form(rng)
        e = expand(lambda v: -(P(v) > 0).astype(float), lmax=11, q=q)
        for l in (1, 3, 5, 7, 9, 11):
            assert np.max(np.abs(e.degree_slice(l))) < 1e-10

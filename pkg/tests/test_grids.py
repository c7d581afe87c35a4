import json
import os

import numpy as np
import pytest
from numpy.testing import assert_allclose

from conelab.grids import (
    ScalarGrid,
    TooCoarse,
    ball_mask,
    exterior_layer,
    hessian_components,
    laplacian7,
    load_grid,
    mean_hessian,
    save_grid,
)


def _quadratic_grid(m, b=(0.0, 0.0, 0.0), c=0.0, n=21, half=1.0):
    m = np.asarray(m, dtype=float)
    b = np.asarray(b, dtype=float)

    def fn(pts):
        return np.einsum("ni,ij,nj->n", pts, m, pts) + pts @ b + c

    h = 2.0 * half / (n - 1)
    return ScalarGrid.sample(fn, (-half, -half, -half), h, n)


def test_scalargrid_validation():
    with pytest.raises(ValueError):
        ScalarGrid((0, 0, 0), 0.0, np.zeros((3, 3, 3)))
    with pytest.raises(ValueError):
        ScalarGrid((0, 0, 0), 0.1, np.zeros((3, 3)))
    with pytest.raises(ValueError):
        ScalarGrid((0, 0, 0), 0.1, np.zeros((3, 1, 3)))
    g = ScalarGrid((-1, 0, 2), 0.5, np.zeros((3, 4, 5)))
    assert g.dims == (3, 4, 5)
    assert_allclose(g.axis(0), [-1.0, -0.5, 0.0])
    assert_allclose(g.axis(2), 2.0 + 0.5 * np.arange(5))


def test_sample_matches_direct_evaluation():
    g = ScalarGrid.sample(lambda p: p @ np.array([1.0, 2.0, 3.0]),
                          (-1, -1, -1), 0.25, (9, 5, 7))
    x, y, z = g.axes()
    expect = x[:, None, None] + 2.0 * y[None, :, None] + 3.0 * z[None, None, :]
    assert_allclose(g.values, expect, atol=1e-14)


def test_laplacian_exact_on_quadratics():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(3, 3))
    m = 0.5 * (a + a.T)
    g = _quadratic_grid(m, b=rng.normal(size=3), c=0.7)
    assert_allclose(laplacian7(g), 2.0 * np.trace(m), atol=1e-10)


def test_hessian_components_exact_on_quadratics():
    rng = np.random.default_rng(11)
    a = rng.normal(size=(3, 3))
    m = 0.5 * (a + a.T)
    g = _quadratic_grid(m, b=rng.normal(size=3))
    xx, yy, zz, xy, xz, yz = hessian_components(g)
    for comp, val in [(xx, m[0, 0]), (yy, m[1, 1]), (zz, m[2, 2]),
                      (xy, m[0, 1]), (xz, m[0, 2]), (yz, m[1, 2])]:
        assert_allclose(comp, 2.0 * val, atol=1e-10)


def test_mean_hessian_recovers_quadratic():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(3, 3))
    m = 0.5 * (a + a.T)
    g = _quadratic_grid(m, n=33)
    assert_allclose(mean_hessian(g, 0.6), 2.0 * m, atol=1e-10)
    # off-center ball, still exact
    assert_allclose(mean_hessian(g, 0.3, center=(0.25, -0.125, 0.0)),
                    2.0 * m, atol=1e-10)


def test_mean_hessian_vanishes_on_odd_cubic():
    # x^3 - 3xz^2 is odd and harmonic; second differences are exact on
    # cubics and the symmetric ball average cancels them entirely.
    def fn(pts):
        return pts[:, 0] ** 3 - 3.0 * pts[:, 0] * pts[:, 2] ** 2

    g = ScalarGrid.sample(fn, (-1, -1, -1), 2.0 / 32, 33)
    assert_allclose(mean_hessian(g, 0.7), np.zeros((3, 3)), atol=1e-10)


def test_mean_hessian_never_reads_outside_the_ball():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(3, 3))
    m = 0.5 * (a + a.T)
    g = _quadratic_grid(m, n=33)
    poisoned = np.where(ball_mask(g, 0.6, strict=False), g.values, np.nan)
    gp = ScalarGrid(g.origin, g.spacing, poisoned)
    assert_allclose(mean_hessian(gp, 0.6), 2.0 * m, atol=1e-10)


def test_mean_hessian_too_coarse():
    g = _quadratic_grid(np.eye(3), n=9)
    with pytest.raises(TooCoarse):
        mean_hessian(g, 0.5 * g.spacing)


def test_ball_mask_volume_and_symmetry():
    g = ScalarGrid((-1, -1, -1), 2.0 / 64, np.zeros((65, 65, 65)))
    mask = ball_mask(g, 0.8)
    vol = mask.sum() * g.spacing ** 3
    assert abs(vol - 4.0 / 3.0 * np.pi * 0.8 ** 3) < 0.02
    for axis in range(3):
        assert np.array_equal(mask, np.flip(mask, axis=axis))


def test_exterior_layer_touches_mask():
    g = ScalarGrid((-1, -1, -1), 2.0 / 32, np.zeros((33, 33, 33)))
    mask = ball_mask(g, 0.7)
    layer = exterior_layer(mask)
    assert not (layer & mask).any()
    # every layer node has a 6-neighbour inside the mask
    padded = np.pad(mask, 1)
    has_inside = np.zeros_like(mask)
    for a, b, c in [(1, 0, 0), (-1, 0, 0), (0, 1, 0),
                    (0, -1, 0), (0, 0, 1), (0, 0, -1)]:
        has_inside |= padded[1 + a:34 + a, 1 + b:34 + b, 1 + c:34 + c]
    assert has_inside[layer].all()


def test_grid_io_roundtrip(tmp_path):
    rng = np.random.default_rng(19)
    g = ScalarGrid((-1.0, 0.25, 3.0), 0.125, rng.normal(size=(9, 7, 5)))
    path = os.fspath(tmp_path / "field.grid")
    save_grid(g, path)
    assert os.path.getsize(path) == 8 * 9 * 7 * 5
    with open(path + ".json", encoding="utf-8") as fh:
        meta = json.load(fh)
    assert meta["byte_order"] == "little"
    assert meta["dtype"] == "float64"
    assert meta["dims"] == [9, 7, 5]
    back = load_grid(path)
    assert np.array_equal(back.values, g.values)
    assert_allclose(back.origin, g.origin)
    assert back.spacing == g.spacing


def test_grid_io_rejects_truncated_block(tmp_path):
    g = ScalarGrid((0, 0, 0), 1.0, np.zeros((4, 4, 4)))
    path = os.fspath(tmp_path / "broken.grid")
    save_grid(g, path)
    with open(path, "r+b") as fh:
        fh.truncate(100)
    with pytest.raises(ValueError):
        load_grid(path)

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.sparse import csc_matrix
from scipy.sparse.linalg import spsolve

from conelab.grids import ScalarGrid, ball_mask, exterior_layer
from conelab.multigrid import (
    InnerDivergence,
    build_hierarchy,
    solve_poisson,
)
from conelab.multigrid import _prolong, _restrict


def _box_mask(n):
    mask = np.zeros((n, n, n), dtype=bool)
    mask[1:-1, 1:-1, 1:-1] = True
    return mask


def _sparse_oracle(mask, spacing, rhs, fixed_values):
    """Direct solve of the identical masked seven-point system."""
    idx = np.full(mask.shape, -1, dtype=np.int64)
    count = int(mask.sum())
    idx[mask] = np.arange(count)
    ii, jj, kk = np.nonzero(mask)
    h2 = spacing ** 2
    rows, cols, vals = [np.arange(count)], [np.arange(count)], [np.full(count, -6.0 / h2)]
    b = rhs[mask].astype(float).copy()
    for a, bb, c in [(1, 0, 0), (-1, 0, 0), (0, 1, 0),
                     (0, -1, 0), (0, 0, 1), (0, 0, -1)]:
        nb = idx[ii + a, jj + bb, kk + c]
        inside = nb >= 0
        rows.append(np.arange(count)[inside])
        cols.append(nb[inside])
        vals.append(np.full(int(inside.sum()), 1.0 / h2))
        b[~inside] -= fixed_values[ii[~inside] + a, jj[~inside] + bb,
                                   kk[~inside] + c] / h2
    a_mat = csc_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(count, count))
    out = fixed_values.copy()
    out[mask] = spsolve(a_mat, b)
    return out


def test_matches_dense_oracle_on_box():
    n = 9
    rng = np.random.default_rng(2)
    mask = _box_mask(n)
    h = 1.0 / (n - 1)
    rhs = rng.normal(size=(n, n, n))
    u0 = np.zeros((n, n, n))
    shell = ~mask
    u0[shell] = rng.normal(size=int(shell.sum()))
    oracle = _sparse_oracle(mask, h, rhs, u0)
    hier = build_hierarchy(mask, h)
    u, cycles, res = solve_poisson(hier, rhs, u0, rtol=1e-13)
    assert cycles > 0
    assert_allclose(u, oracle, atol=1e-9)


def test_reproduces_quadratic_exactly():
    # The seven-point stencil is exact on quadratics, so the discrete
    # solution with quadratic boundary data and constant rhs is the
    # quadratic itself.
    n = 17
    g = ScalarGrid((-1, -1, -1), 2.0 / (n - 1), np.zeros((n, n, n)))
    x, y, z = g.axes()
    q = (x[:, None, None] ** 2 + 0.5 * y[None, :, None] ** 2
         - 2.0 * z[None, None, :] ** 2 + x[:, None, None] * y[None, :, None])
    mask = _box_mask(n)
    u0 = np.where(mask, 0.0, q)
    rhs = np.full((n, n, n), 2.0 * (1.0 + 0.5 - 2.0))
    hier = build_hierarchy(mask, g.spacing)
    u, _, _ = solve_poisson(hier, rhs, u0, rtol=1e-13)
    assert_allclose(u, q, atol=1e-9)


def test_masked_ball_matches_sparse_oracle():
    n = 17
    g = ScalarGrid((-1, -1, -1), 2.0 / (n - 1), np.zeros((n, n, n)))
    mask = ball_mask(g, 0.8)
    layer = exterior_layer(mask)
    x, y, z = g.axes()
    harmonic = (x[:, None, None] + 2.0 * y[None, :, None]
                - z[None, None, :])
    u0 = np.where(layer, harmonic, 0.0)
    rhs = np.full((n, n, n), 6.0)
    oracle = _sparse_oracle(mask, g.spacing, rhs, u0)
    hier = build_hierarchy(mask, g.spacing)
    u, _, _ = solve_poisson(hier, rhs, u0, rtol=1e-13)
    assert_allclose(u[mask], oracle[mask], atol=1e-9)


def test_richardson_consistency_order():
    # Poisson solve against a smooth manufactured field; the max error
    # should shrink at second order across 33/65/129 nodes per axis.
    def exact(x, y, z):
        return (np.sin(np.pi * x)[:, None, None]
                * np.sin(np.pi * y)[None, :, None]
                * z[None, None, :] ** 2)

    errors = []
    spacings = []
    for n in (33, 65, 129):
        g = ScalarGrid((-1, -1, -1), 2.0 / (n - 1), np.zeros((n, n, n)))
        x, y, z = g.axes()
        ue = exact(x, y, z)
        sinsin = np.sin(np.pi * x)[:, None, None] * np.sin(np.pi * y)[None, :, None]
        rhs = sinsin * (2.0 - 2.0 * np.pi ** 2 * z[None, None, :] ** 2)
        mask = _box_mask(n)
        u0 = np.where(mask, 0.0, ue)
        hier = build_hierarchy(mask, g.spacing)
        u, _, _ = solve_poisson(hier, rhs, u0, rtol=1e-11)
        errors.append(float(np.abs(u - ue).max()))
        spacings.append(g.spacing)
    slope = np.polyfit(np.log(spacings), np.log(errors), 1)[0]
    assert 1.8 <= slope <= 2.2


def test_restriction_is_adjoint_of_prolongation():
    rng = np.random.default_rng(8)
    fine = rng.normal(size=(17, 17, 17))
    fine[0], fine[-1] = 0.0, 0.0
    fine[:, 0], fine[:, -1] = 0.0, 0.0
    fine[:, :, 0], fine[:, :, -1] = 0.0, 0.0
    coarse = rng.normal(size=(9, 9, 9))
    coarse[0], coarse[-1] = 0.0, 0.0
    coarse[:, 0], coarse[:, -1] = 0.0, 0.0
    coarse[:, :, 0], coarse[:, :, -1] = 0.0, 0.0
    lhs = float(np.sum(_restrict(fine) * coarse))
    rhs = float(np.sum(fine * _prolong(coarse, fine.shape))) / 8.0
    assert abs(lhs - rhs) < 1e-12 * max(1.0, abs(lhs))


def test_deterministic_across_runs():
    n = 17
    rng = np.random.default_rng(3)
    rhs = rng.normal(size=(n, n, n))
    mask = _box_mask(n)
    hier = build_hierarchy(mask, 1.0 / (n - 1))
    u1, c1, r1 = solve_poisson(hier, rhs, np.zeros((n, n, n)), rtol=1e-10)
    u2, c2, r2 = solve_poisson(hier, rhs, np.zeros((n, n, n)), rtol=1e-10)
    assert c1 == c2 and r1 == r2
    assert np.array_equal(u1, u2)


def test_solved_input_needs_no_cycles():
    n = 9
    g = ScalarGrid((-1, -1, -1), 2.0 / (n - 1), np.zeros((n, n, n)))
    x, y, z = g.axes()
    q = np.broadcast_to(x[:, None, None] ** 2 - z[None, None, :] ** 2,
                        (n, n, n)).copy()
    hier = build_hierarchy(_box_mask(n), g.spacing)
    u, cycles, res = solve_poisson(hier, np.zeros((n, n, n)), q, rtol=1e-10)
    assert cycles == 0
    assert res == 0.0
    assert np.array_equal(u, q)


def test_stalled_solve_raises():
    n = 17
    rng = np.random.default_rng(4)
    rhs = rng.normal(size=(n, n, n))
    hier = build_hierarchy(_box_mask(n), 1.0 / (n - 1))
    with pytest.raises(InnerDivergence):
        solve_poisson(hier, rhs, np.zeros((n, n, n)), rtol=1e-12, max_cycles=1)


def test_hierarchy_validation():
    bad = np.ones((9, 9, 9), dtype=bool)
    with pytest.raises(ValueError):
        build_hierarchy(bad, 0.1)
    with pytest.raises(ValueError):
        build_hierarchy(np.ones((4, 4), dtype=bool), 0.1)
    # even dims cannot coarsen; the direct-solve cap refuses huge ones
    big = np.zeros((52, 52, 52), dtype=bool)
    big[1:-1, 1:-1, 1:-1] = True
    with pytest.raises(ValueError):
        build_hierarchy(big, 0.1)
    # but a small even grid is fine: one level plus direct solve
    small = np.zeros((12, 12, 12), dtype=bool)
    small[1:-1, 1:-1, 1:-1] = True
    hier = build_hierarchy(small, 0.1)
    assert len(hier.levels) == 1

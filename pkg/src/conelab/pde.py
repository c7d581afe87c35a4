"""The obstacle-problem fixed point and its manufactured near-singular fields.

The equation is Delta u = f * chi_{u > psi} on a box or on a ball embedded
in a box, with Dirichlet data.  The indicator makes the right side jump as
u crosses the obstacle, so the solver iterates a damped fixed point: each
outer step freezes the indicator, solves the linear Poisson problem by
multigrid, and blends the result into the current iterate.  Non-convergence
is a legal outcome (the problem is genuinely non-unique and unstable) and is
reported as MaxIterations rather than papered over.

Manufactured fields combine a trace-free quadratic profile with the
log-potential of its positivity set; they satisfy the equation up to a thin
discrepancy set and anchor every accuracy claim downstream.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import ndimage
from scipy.interpolate import RegularGridInterpolator
from scipy.linalg import solve_banded

from conelab.grids import (
    ScalarGrid,
    TooCoarse,
    ball_mask,
    exterior_layer,
    hessian_components,
    mean_hessian,
)
from conelab.multigrid import build_hierarchy, solve_poisson
from conelab.quadform import QuadraticForm, diagonal_profile, rotate
from conelab.potential import build_potential, eval_potential

__all__ = [
    "MaxIterations",
    "ConstantSource", "AffineSource", "RadialSource",
    "ZeroObstacle", "QuadraticObstacle", "ProfileObstacle", "GridObstacle",
    "ConstantBoundary", "FunctionBoundary", "ManufacturedField",
    "BoxDomain", "BallDomain", "ProblemSpec", "SolveReport",
    "solve", "manufactured", "residual_potential", "reduce_source",
    "solve_interval",
]


class MaxIterations(RuntimeError):
    """The outer fixed point did not meet its tolerance within max_outer."""


def _axes_mesh(x, y, z):
    return x[:, None, None], y[None, :, None], z[None, None, :]


class _Field:
    """Shared evaluation helpers for source and obstacle descriptors."""

    def at(self, point) -> float:
        p = np.asarray(point, dtype=float)
        v = self.field(np.array([p[0]]), np.array([p[1]]), np.array([p[2]]))
        return float(v[0, 0, 0])

    def at_points(self, pts: np.ndarray) -> np.ndarray:
        """Values at a list of points, chunked so the mesh stays small."""
        pts = np.asarray(pts, dtype=float)
        out = np.empty(pts.shape[0])
        step = 48
        for lo in range(0, pts.shape[0], step):
            chunk = pts[lo:lo + step]
            vals = self.field(chunk[:, 0], chunk[:, 1], chunk[:, 2])
            out[lo:lo + chunk.shape[0]] = np.einsum("iii->i", vals)
        return out


# ---------------------------------------------------------------------------
# source catalog

@dataclass(frozen=True)
class ConstantSource(_Field):
    value: float = -1.0

    def field(self, x, y, z):
        return np.full((x.size, y.size, z.size), float(self.value))

    def modulus(self, t):
        return np.zeros_like(np.asarray(t, dtype=float))


@dataclass(frozen=True)
class AffineSource(_Field):
    """f(x) = constant + gradient . x with Lipschitz modulus |gradient| t."""

    constant: float
    gradient: tuple[float, float, float]

    def field(self, x, y, z):
        gx, gy, gz = self.gradient
        xx, yy, zz = _axes_mesh(x, y, z)
        return np.broadcast_to(
            self.constant + gx * xx + gy * yy + gz * zz,
            (x.size, y.size, z.size)).copy()

    def modulus(self, t):
        return float(np.linalg.norm(self.gradient)) * np.asarray(t, dtype=float)


@dataclass(frozen=True)
class RadialSource(_Field):
    """f(x) = constant + slope * |x|; radially smooth, modulus |slope| t."""

    constant: float
    slope: float

    def field(self, x, y, z):
        xx, yy, zz = _axes_mesh(x, y, z)
        return self.constant + self.slope * np.sqrt(xx ** 2 + yy ** 2 + zz ** 2)

    def modulus(self, t):
        return abs(self.slope) * np.asarray(t, dtype=float)


# ---------------------------------------------------------------------------
# obstacle catalog

def _quadratic_values(form: QuadraticForm, x, y, z):
    m = form.m
    xx, yy, zz = _axes_mesh(x, y, z)
    return (m[0, 0] * xx ** 2 + m[1, 1] * yy ** 2 + m[2, 2] * zz ** 2
            + 2.0 * (m[0, 1] * xx * yy + m[0, 2] * xx * zz
                     + m[1, 2] * yy * zz))


@dataclass(frozen=True)
class ZeroObstacle(_Field):
    def field(self, x, y, z):
        return np.zeros((x.size, y.size, z.size))


@dataclass(frozen=True)
class QuadraticObstacle(_Field):
    form: QuadraticForm

    def field(self, x, y, z):
        return _quadratic_values(self.form, x, y, z)


@dataclass(frozen=True)
class ProfileObstacle(_Field):
    """psi(x) = coefficient * |x|^(2 + alpha), a C^{1,alpha} profile at 0."""

    coefficient: float
    alpha: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")

    def field(self, x, y, z):
        xx, yy, zz = _axes_mesh(x, y, z)
        r2 = xx ** 2 + yy ** 2 + zz ** 2
        return self.coefficient * r2 ** (0.5 * (2.0 + self.alpha))


@dataclass(frozen=True, eq=False)
class GridObstacle(_Field):
    """Obstacle backed by a grid (plus an optional base descriptor).

    Produced by reduce_source; not part of the checked catalog, so the
    quadratic-scaling bound is the producer's responsibility.
    """

    grid: ScalarGrid
    base: object | None = None

    catalog = False

    @cached_property
    def _interp(self):
        return RegularGridInterpolator(
            self.grid.axes(), self.grid.values,
            method="linear", bounds_error=False, fill_value=0.0)

    def field(self, x, y, z):
        pts = np.stack(np.meshgrid(x, y, z, indexing="ij"), axis=-1)
        vals = self._interp(pts)
        if self.base is not None:
            vals = vals + self.base.field(x, y, z)
        return vals


def _fibonacci_directions(n: int) -> np.ndarray:
    k = np.arange(n) + 0.5
    phi = np.pi * (1.0 + np.sqrt(5.0)) * k
    ct = 1.0 - 2.0 * k / n
    st = np.sqrt(np.maximum(0.0, 1.0 - ct ** 2))
    return np.column_stack([st * np.cos(phi), st * np.sin(phi), ct])


def _obstacle_scaling_sup(obstacle, radii=None, ndirs: int = 1024) -> float:
    """Numeric sup of |psi(r x) / r^2| over the unit ball and the r-ladder."""
    if radii is None:
        radii = [0.25, 0.125, 0.0625, 0.015625]
    dirs = _fibonacci_directions(ndirs)
    sup = 0.0
    for r in radii:
        for rho in (0.25, 0.5, 0.75, 1.0):
            vals = obstacle.at_points((r * rho) * dirs)
            sup = max(sup, float(np.abs(vals).max()) / r ** 2)
    return sup


# ---------------------------------------------------------------------------
# boundary catalog

@dataclass(frozen=True)
class ConstantBoundary:
    value: float

    def values(self, pts: np.ndarray) -> np.ndarray:
        return np.full(pts.shape[0], float(self.value))


@dataclass(frozen=True)
class FunctionBoundary:
    fn: object

    def values(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(self.fn(pts), dtype=float).reshape(pts.shape[0])


@dataclass(frozen=True, eq=False)
class ManufacturedField:
    """tau * p(Qx) + amplitude * Z_p(Qx) for the diagonal profile p.

    Doubles as boundary data (``values``) and as the exact comparison field
    for solver accuracy claims.  Requires tau >= 10 * amplitude so the
    quadratic part dominates the potential away from its null set.
    """

    tau: float
    delta: float
    rotation: np.ndarray | None = None
    amplitude: float = 1.0
    lmax: int = 40
    sign: int = 1
    level: int = 64

    def __post_init__(self):
        if self.amplitude <= 0.0:
            raise ValueError("amplitude must be positive")
        if self.tau < 10.0 * self.amplitude:
            raise ValueError("tau must be at least 10 * amplitude")
        if not 0.0 <= self.delta <= 0.5:
            raise ValueError("delta must lie in [0, 1/2]")
        if self.sign not in (-1, 1):
            raise ValueError("sign must be +1 or -1")
        q = np.eye(3) if self.rotation is None else \
            np.asarray(self.rotation, dtype=float)
        object.__setattr__(self, "rotation", q)

    @cached_property
    def _form(self) -> QuadraticForm:
        profile = diagonal_profile(self.delta, sign=self.sign)
        return rotate(profile, self.rotation)

    @cached_property
    def _zp(self):
        return build_potential(self._form, amplitude=self.amplitude,
                               lmax=self.lmax, level=self.level)

    def values(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return self.tau * self._form(pts) + eval_potential(self._zp, pts)


def manufactured(tau: float, delta: float, rotation=None,
                 amplitude: float = 1.0, lmax: int = 40,
                 dims: int = 65, radius: float = 1.0,
                 sign: int = 1) -> ScalarGrid:
    """Sample the manufactured near-singular field on a centered box grid.

    The field solves Delta u = -amplitude * chi_{u > 0} away from the thin
    set where the potential part rivals tau times the profile.
    """
    fld = ManufacturedField(tau, delta, rotation, amplitude, lmax, sign)
    n = int(dims)
    spacing = 2.0 * radius / (n - 1)
    return ScalarGrid.sample(fld.values, (-radius, -radius, -radius),
                             spacing, (n, n, n))


# ---------------------------------------------------------------------------
# domains and the problem description

@dataclass(frozen=True)
class BoxDomain:
    half_width: float = 1.0

    def __post_init__(self):
        if self.half_width <= 0.0:
            raise ValueError("half_width must be positive")


@dataclass(frozen=True)
class BallDomain:
    """Ball of the given radius, embedded in a box of half_width."""

    radius: float = 1.0
    half_width: float | None = None

    def __post_init__(self):
        if self.radius <= 0.0:
            raise ValueError("radius must be positive")
        hw = 1.2 * self.radius if self.half_width is None else float(self.half_width)
        object.__setattr__(self, "half_width", hw)
        if hw <= self.radius:
            raise ValueError("the embedding box must be wider than the ball")


@dataclass(frozen=True)
class ProblemSpec:
    """Everything solve() needs: geometry, data catalog entries, tolerances.

    The obstacle catalog entry is checked numerically at construction
    against the scaling bound sup |psi(r x)/r^2| <= c_psi; the source must
    be negative at the study point (the origin) when singular-point
    analysis is intended.
    """

    source: object
    obstacle: object
    boundary: object
    domain: object = BoxDomain(1.0)
    dims: int = 65
    tol_outer: float = 1e-6
    tol_inner: float = 1e-8
    max_outer: int = 200
    damping: float = 0.6
    c_psi: float = 1.0
    singular_study: bool = True
    initial: ScalarGrid | None = None

    def __post_init__(self):
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must lie in (0, 1]")
        if self.tol_outer <= 0.0 or self.tol_inner <= 0.0:
            raise ValueError("tolerances must be positive")
        if self.max_outer < 1:
            raise ValueError("max_outer must be at least 1")
        if int(self.dims) < 5:
            raise ValueError("need at least 5 nodes per axis")
        object.__setattr__(self, "dims", int(self.dims))
        if getattr(self.obstacle, "catalog", True):
            sup = _obstacle_scaling_sup(self.obstacle)
            if sup > self.c_psi:
                raise ValueError(
                    f"obstacle violates the scaling bound: sup |psi_r| = "
                    f"{sup:.4g} > c_psi = {self.c_psi}")
        if self.singular_study and self.source.at((0.0, 0.0, 0.0)) >= 0.0:
            raise ValueError(
                "singular-point study needs a negative source at the origin")

    @property
    def spacing(self) -> float:
        return 2.0 * self.domain.half_width / (self.dims - 1)

    def grid_axes(self):
        h = self.spacing
        hw = self.domain.half_width
        ax = -hw + h * np.arange(self.dims)
        return ax, ax.copy(), ax.copy()


def _updatable_mask(spec: ProblemSpec):
    n = spec.dims
    if isinstance(spec.domain, BallDomain):
        shell = ScalarGrid((-spec.domain.half_width,) * 3, spec.spacing,
                           np.zeros((n, n, n)))
        mask = ball_mask(shell, spec.domain.radius)
        if spec.domain.radius + 2.0 * spec.spacing > spec.domain.half_width:
            raise ValueError(
                "ball leaves no room for the Dirichlet layer; enlarge the "
                "box or refine the grid")
        return mask
    mask = np.zeros((n, n, n), dtype=bool)
    mask[1:-1, 1:-1, 1:-1] = True
    return mask


@dataclass(frozen=True)
class SolveReport:
    converged: bool
    outer_iterations: int
    inner_cycles: int
    init_cycles: int
    final_change: float
    residual_sup: float
    max_principle_ok: bool | None
    positive_set_nodes: int
    active_nodes: int
    dims: int
    spacing: float

    def as_dict(self) -> dict:
        return {
            "converged": self.converged,
            "outer_iterations": self.outer_iterations,
            "inner_cycles": self.inner_cycles,
            "init_cycles": self.init_cycles,
            "final_change": self.final_change,
            "residual_sup": self.residual_sup,
            "max_principle_ok": self.max_principle_ok,
            "positive_set_nodes": self.positive_set_nodes,
            "active_nodes": self.active_nodes,
            "dims": self.dims,
            "spacing": self.spacing,
        }


def _sup_interior_residual(u, rhs, upd, h):
    h2 = h * h
    lap = (u[:-2, 1:-1, 1:-1] + u[2:, 1:-1, 1:-1]
           + u[1:-1, :-2, 1:-1] + u[1:-1, 2:, 1:-1]
           + u[1:-1, 1:-1, :-2] + u[1:-1, 1:-1, 2:]
           - 6.0 * u[1:-1, 1:-1, 1:-1]) / h2
    diff = np.abs(lap - rhs[1:-1, 1:-1, 1:-1])
    sel = upd[1:-1, 1:-1, 1:-1]
    return float(diff[sel].max(initial=0.0))


_STRUCT6 = ndimage.generate_binary_structure(3, 1)


def _max_principle_ok(u, upd, chi, layer) -> bool:
    """Interior minima must sit against the boundary or the positive set."""
    umin = float(u[upd].min())
    tol = 1e-12 * max(1.0, abs(umin))
    if float(u[layer].min(initial=np.inf)) <= umin + tol:
        return True
    candidates = upd & (u <= umin + tol)
    near_chi = ndimage.binary_dilation(chi, structure=_STRUCT6)
    near_layer = ndimage.binary_dilation(layer, structure=_STRUCT6)
    return bool(np.all(near_chi[candidates] | near_layer[candidates]))


def solve(spec: ProblemSpec, allow_unconverged: bool = False):
    """Damped fixed-point solve of Delta u = f * chi_{u > psi}.

    Returns (grid, report).  Raises MaxIterations when the outer iteration
    does not settle (pass allow_unconverged to get the partial state and a
    report with converged=False) and propagates InnerDivergence from the
    linear solver.
    """
    x, y, z = spec.grid_axes()
    h = spec.spacing
    n = spec.dims
    f_vals = spec.source.field(x, y, z)
    psi_vals = spec.obstacle.field(x, y, z)
    upd = _updatable_mask(spec)
    layer = exterior_layer(upd)
    fixed_eval = ~upd if isinstance(spec.domain, BoxDomain) else layer

    ii, jj, kk = np.nonzero(fixed_eval)
    bpts = np.column_stack([x[ii], y[jj], z[kk]])
    bvals = spec.boundary.values(bpts)

    u = np.zeros((n, n, n))
    hier = build_hierarchy(upd, h)
    init_cycles = 0
    if spec.initial is not None:
        if spec.initial.values.shape != (n, n, n):
            raise ValueError("initial grid dims do not match the spec")
        if not (np.allclose(spec.initial.spacing, h)
                and np.allclose(spec.initial.origin,
                                (-spec.domain.half_width,) * 3)):
            raise ValueError("initial grid layout does not match the spec")
        u = spec.initial.values.copy()
        u[fixed_eval] = bvals
    else:
        u[fixed_eval] = bvals
        u, init_cycles, _ = solve_poisson(
            hier, np.zeros((n, n, n)), u, rtol=spec.tol_inner)

    theta = spec.damping
    converged = False
    total_cycles = 0
    change = np.inf
    outer = 0
    for outer in range(1, spec.max_outer + 1):
        chi = (u > psi_vals) & upd
        rhs = np.where(chi, f_vals, 0.0)
        v, cycles, _ = solve_poisson(hier, rhs, u, rtol=spec.tol_inner)
        total_cycles += cycles
        dv = v - u
        change = theta * float(np.abs(dv[upd]).max(initial=0.0))
        u += theta * dv
        if change <= spec.tol_outer:
            converged = True
            break

    if converged:
        # One undamped step with the settled indicator: the damped blend is
        # within tol_outer of this linear solution but does not itself meet
        # the inner residual bound; the full step does.
        chi = (u > psi_vals) & upd
        rhs = np.where(chi, f_vals, 0.0)
        u, cycles, _ = solve_poisson(hier, rhs, u, rtol=spec.tol_inner)
        total_cycles += cycles

    chi = (u > psi_vals) & upd
    rhs = np.where(chi, f_vals, 0.0)
    residual_sup = _sup_interior_residual(u, rhs, upd, h)
    mp = None
    if np.all(f_vals[upd] <= 0.0):
        mp = _max_principle_ok(u, upd, chi, layer)
    if not np.isfinite(u[upd | layer]).all():
        raise MaxIterations("iterate left the finite range")

    report = SolveReport(
        converged=converged,
        outer_iterations=outer,
        inner_cycles=total_cycles,
        init_cycles=init_cycles,
        final_change=change,
        residual_sup=residual_sup,
        max_principle_ok=mp,
        positive_set_nodes=int(chi.sum()),
        active_nodes=int(upd.sum()),
        dims=n,
        spacing=h,
    )
    grid = ScalarGrid((-spec.domain.half_width,) * 3, h, u)
    if not converged and not allow_unconverged:
        raise MaxIterations(
            f"outer change {change:.3e} > {spec.tol_outer:.1e} after "
            f"{spec.max_outer} iterations")
    return grid, report


# ---------------------------------------------------------------------------
# residual potential of the decay estimate

def _pad_index_radius(m: int, room: int) -> int:
    """Smallest padding radius in [m+1, m+8] with the best 2-adic depth.

    The sub-grid dimensions become 2 * pad + 1; a deeper power of two in
    pad buys more coarsening levels for the inner multigrid solve.  Nodes
    between the unit sphere and the padded box are fixed at zero, so extra
    padding costs memory only.
    """
    hi = min(m + 8, room)
    if hi < m + 1:
        raise ValueError("ball plus its Dirichlet layer must fit in the domain")
    best = m + 1
    for t in range(m + 1, hi + 1):
        if (t & -t) > (best & -best):
            best = t
    return best


def residual_potential(u: ScalarGrid, r: float, spec: ProblemSpec):
    """Solve the unit-ball correction problem for the rescaled field.

    Rescaling y = x / r sends grid nodes to grid nodes when r is a whole
    number of spacings, so both indicators are evaluated without any
    interpolation: the right side is f(0) on the positivity set of the
    quadratic ball-projection minus f(r y) on the rescaled positivity set
    of u itself.  Returns the correction grid over the unit ball (zero
    Dirichlet data on the first exterior layer) and the discrete L2 norm
    of its Hessian inside the ball.
    """
    h = u.spacing
    n0, n1, n2 = u.dims
    i0 = np.rint(-u.origin / h).astype(int)
    if np.abs(u.origin + i0 * h).max() > 1e-9 * h:
        raise ValueError("the origin must be a grid node")
    m_f = r / h
    m = int(round(m_f))
    if abs(m_f - m) > 1e-9 * max(1, m):
        raise ValueError("radius must be a whole number of grid spacings")
    if m < 8:
        raise TooCoarse(f"need at least 8 nodes per radius, got {m}")
    room = int(min(i0.min(), n0 - 1 - i0[0], n1 - 1 - i0[1], n2 - 1 - i0[2]))
    pad = _pad_index_radius(m, room)

    proj = QuadraticForm(0.5 * mean_hessian(u, r))
    sub = tuple(slice(c - pad, c + pad + 1) for c in i0)
    uv = u.values[sub]
    xs = [u.axis(i)[sub[i]] for i in range(3)]

    h_y = 1.0 / m
    ys = h_y * np.arange(-pad, pad + 1)
    idx = np.arange(-pad, pad + 1)
    d2 = (idx ** 2)[:, None, None] + (idx ** 2)[None, :, None] \
        + (idx ** 2)[None, None, :]
    upd = d2 < m * m

    # Relative floor keeps exactly-zero values of the projection out of the
    # positivity set, so fields that agree with their own projection give a
    # right side that is identically zero.
    floor = 1e-10 * proj.sup_norm()
    chi_proj = _quadratic_values(proj, ys, ys, ys) > floor
    psi_sub = spec.obstacle.field(xs[0], xs[1], xs[2])
    chi_u = uv > psi_sub
    f0 = spec.source.at((0.0, 0.0, 0.0))
    f_sub = spec.source.field(xs[0], xs[1], xs[2])
    rhs = np.where(upd, f0 * chi_proj - f_sub * chi_u, 0.0)

    hier = build_hierarchy(upd, h_y)
    g, _, _ = solve_poisson(hier, rhs, np.zeros_like(rhs), rtol=spec.tol_inner)

    comps = hessian_components(ScalarGrid((-pad * h_y,) * 3, h_y, g))
    sel = upd[1:-1, 1:-1, 1:-1]
    frob2 = (comps[0] ** 2 + comps[1] ** 2 + comps[2] ** 2
             + 2.0 * (comps[3] ** 2 + comps[4] ** 2 + comps[5] ** 2))
    d2g_l2 = float(np.sqrt(frob2[sel].sum() * h_y ** 3))
    return ScalarGrid((-pad * h_y,) * 3, h_y, g), d2g_l2


def reduce_source(source, extra, spec: ProblemSpec) -> ProblemSpec:
    """Fold a smooth extra source into a shifted obstacle.

    Solves Delta shift = -extra with zero boundary data on the spec's
    domain; adding the shift to u turns the problem with right side
    f * chi + extra into the plain obstacle form with obstacle psi + shift.
    Returns the rewritten spec (unchanged when the shift vanishes).
    """
    x, y, z = spec.grid_axes()
    upd = _updatable_mask(spec)
    rhs = np.where(upd, -extra.field(x, y, z), 0.0)
    hier = build_hierarchy(upd, spec.spacing)
    shift, _, _ = solve_poisson(hier, rhs, np.zeros_like(rhs),
                                rtol=spec.tol_inner)
    if float(np.abs(shift).max()) == 0.0:
        return dataclasses.replace(spec, source=source)
    tilde = ScalarGrid((-spec.domain.half_width,) * 3, spec.spacing, shift)
    return dataclasses.replace(
        spec, source=source, obstacle=GridObstacle(grid=tilde, base=spec.obstacle))


# ---------------------------------------------------------------------------
# the one-dimensional sanity path

def solve_interval(n: int = 513, value: float = -1.0, initial=None,
                   damping: float = 0.6, tol: float = 1e-12,
                   max_outer: int = 300):
    """Fixed point for u'' = value * chi_{u > 0} on [0, 1], u(0) = u(1) = 0.

    This is the textbook demonstration that the problem is non-unique: both
    the parabola x(1-x)/2 (for value = -1) and the zero function are fixed
    points, and each is reached from its own initializer.  The grid stands
    in for a 2 x 2 x N box that is periodic in the two short directions,
    which collapses the Laplacian to the second difference used here.
    Returns (x, u, outer_iterations).
    """
    x = np.linspace(0.0, 1.0, n)
    h2 = (x[1] - x[0]) ** 2
    if initial is None:
        u = np.zeros(n)
    elif callable(initial):
        u = np.asarray(initial(x), dtype=float).copy()
        u[0] = u[-1] = 0.0
    else:
        u = np.asarray(initial, dtype=float).copy()
        if u.shape != (n,):
            raise ValueError("initial data length must match n")
    ab = np.zeros((3, n - 2))
    ab[0, 1:] = 1.0 / h2
    ab[1, :] = -2.0 / h2
    ab[2, :-1] = 1.0 / h2
    for outer in range(1, max_outer + 1):
        chi = u[1:-1] > 0.0
        rhs = np.where(chi, float(value), 0.0)
        v = np.zeros(n)
        v[1:-1] = solve_banded((1, 1), ab, rhs)
        change = damping * float(np.abs(v - u).max())
        u += damping * (v - u)
        if change <= tol:
            return x, u, outer
    raise MaxIterations(f"interval fixed point stalled at change {change:.3e}")

"""conelab: a numerical laboratory for the unstable obstacle problem.

The package revolves around a small set of objects: quadratic forms and
their canonical (sign, delta, rotation, amplitude) decomposition, spherical
quadrature and real harmonic expansions, the log-potential attached to the
positivity set of a form, the dyadic renormalization dynamics acting on
forms, finite-difference solvers for Delta u = f * chi_{u > psi}, and the
blow-up analysis pipeline (projection, rescaling, free-boundary extraction,
cone/cross classification).
"""

from conelab.quadform import (
    QuadraticForm,
    CanonicalForm,
    canonicalize,
    rotate,
    diagonal_profile,
    random_form,
    ZeroForm,
    NotOrthogonal,
)
from conelab.sphere import (
    SphereQuadrature,
    HarmonicExpansion,
    build_quadrature,
    expand,
    eval_expansion,
    degree2_form,
)
from conelab.potential import (
    IndicatorMoments,
    LogPotential,
    indicator_moments,
    kappa,
    build_potential,
    eval_potential,
    potential_projection,
    growth_margin,
)
from conelab.renorm import (
    RenormState,
    BoundedNoise,
    Trajectory,
    NotConverged,
    step,
    simulate,
    rate_fit,
    increment_bounds,
)
from conelab.grids import (
    ScalarGrid,
    TooCoarse,
    save_grid,
    load_grid,
)
from conelab.pde import (
    ProblemSpec,
    SolveReport,
    MaxIterations,
    ConstantSource,
    AffineSource,
    RadialSource,
    ZeroObstacle,
    QuadraticObstacle,
    ProfileObstacle,
    GridObstacle,
    ConstantBoundary,
    ManufacturedField,
    BoxDomain,
    BallDomain,
    manufactured,
    solve,
    solve_interval,
    residual_potential,
)
from conelab.blowup import (
    CONE_INCREMENT,
    BlowupRecord,
    Classification,
    TriangleMesh,
    ConeFit,
    SublevelEstimate,
    EmptySurface,
    DegenerateFit,
    project,
    blowup_sequence,
    free_boundary,
    cone_fit,
    sublevel_measure,
    to_ply,
)

__version__ = "0.1.0"

__all__ = [
    "QuadraticForm",
    "CanonicalForm",
    "canonicalize",
    "rotate",
    "diagonal_profile",
    "random_form",
    "ZeroForm",
    "NotOrthogonal",
    "SphereQuadrature",
    "HarmonicExpansion",
    "build_quadrature",
    "expand",
    "eval_expansion",
    "degree2_form",
    "IndicatorMoments",
    "LogPotential",
    "indicator_moments",
    "kappa",
    "build_potential",
    "eval_potential",
    "potential_projection",
    "growth_margin",
    "RenormState",
    "BoundedNoise",
    "Trajectory",
    "NotConverged",
    "step",
    "simulate",
    "rate_fit",
    "increment_bounds",
    "ScalarGrid",
    "TooCoarse",
    "save_grid",
    "load_grid",
    "ProblemSpec",
    "SolveReport",
    "MaxIterations",
    "ConstantSource",
    "AffineSource",
    "RadialSource",
    "ZeroObstacle",
    "QuadraticObstacle",
    "ProfileObstacle",
    "GridObstacle",
    "ConstantBoundary",
    "ManufacturedField",
    "BoxDomain",
    "BallDomain",
    "manufactured",
    "solve",
    "solve_interval",
    "residual_potential",
    "CONE_INCREMENT",
    "BlowupRecord",
    "Classification",
    "TriangleMesh",
    "ConeFit",
    "SublevelEstimate",
    "EmptySurface",
    "DegenerateFit",
    "project",
    "blowup_sequence",
    "free_boundary",
    "cone_fit",
    "sublevel_measure",
    "to_ply",
    "__version__",
]

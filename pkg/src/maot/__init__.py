"""Nonvariational finite element solver for the Monge-Ampere equation
with optimal transport boundary conditions in two dimensions."""

from .mesh import (
    Mesh,
    triangulate_square,
    triangulate_disk,
    refine,
    meshsize,
    write_mesh,
    read_mesh,
)
from .fe_space import FESpace, build_space, eval_basis, interpolate
from .assembly import (
    mass_matrix,
    derivative_matrix,
    boundary_matrix,
    oblique_boundary_matrix,
    weighted_mass,
    total_mass_vector,
    solve_sparse,
)
from .recovery import (
    RecoveredField,
    recover_gradient,
    fe_hessian,
    fe_hessian_recovered,
    convexity_check,
)
from .oblique import LinearObliqueProblem, ObliqueResult, solve_oblique
from .nonlinear import (
    DefiningFunction,
    ProblemData,
    NewtonState,
    SolveOptions,
    cofactor,
    ma_residual,
    make_circle_target,
    make_ellipse_target,
    make_square_target,
    newton_step,
    solve_maot,
)
from .bench import run_convergence
from .image_transport import (
    PixelDensity,
    load_bitmap,
    build_image_problem,
    solve_image,
    deformed_grid,
    render_svg,
)

__version__ = "0.1.0"

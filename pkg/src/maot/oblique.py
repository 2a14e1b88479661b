"""Nonvariational FEM for linear elliptic problems in nondivergence form
with oblique derivative boundary conditions.

The PDE row A : D2u + b . grad u + c u = r is tested directly against
the basis (no integration by parts); the Hessian enters as an explicit
unknown tied to the potential by recovery rows.  The boundary condition
beta . grad u = s is tested on the boundary and added to the PDE row,
and a scalar Lagrange multiplier pins the mean of u, giving a block
system of size 6N + 1 with gradient recovery (unknowns u, g1, g2, h11,
h12, h22, c) or 4N + 1 without it.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import assembly
from .fe_space import FESpace, cell_tables, edge_tables
from .recovery import RecoveredField, hessian_operators

__all__ = [
    "LinearObliqueProblem",
    "ObliqueResult",
    "BlockSystem",
    "solve_oblique",
    "ObliquenessError",
    "EllipticityError",
]


class ObliquenessError(ValueError):
    """beta . n <= 0 somewhere on the boundary."""


class EllipticityError(ValueError):
    """Diffusion matrix not positive definite at a sample point."""


@dataclass(frozen=True)
class LinearObliqueProblem:
    """Coefficient functions of the linear problem.

    All callables take physical points of shape (..., 2); `A` returns
    (..., 2, 2), `b` and `beta` return (..., 2), the rest return (...,).
    `b` and `c` may be None (zero); `c` must be nonpositive.
    """

    A: object
    r: object
    beta: object
    s: object
    b: object = None
    c: object = None


@dataclass(frozen=True)
class Coefficients:
    """Problem data sampled at the quadrature points of one space."""

    A: np.ndarray        # (nc, q, 2, 2)
    r: np.ndarray        # (nc, q)
    beta: np.ndarray     # (nb, qe, 2)
    s: np.ndarray        # (nb, qe)
    b: np.ndarray = None  # (nc, q, 2)
    c: np.ndarray = None  # (nc, q)


@dataclass(frozen=True)
class BlockSystem:
    """Assembled saddle system E z = f with named block layout."""

    E: sp.csr_matrix
    f: np.ndarray
    n_dofs: int
    layout: tuple


@dataclass(frozen=True)
class ObliqueResult:
    u: np.ndarray
    g: object            # RecoveredField or None without gradient recovery
    H: RecoveredField
    c_mult: float


def sample_problem(space: FESpace, problem: LinearObliqueProblem,
                   quad_degree=None) -> Coefficients:
    """Evaluate the coefficient callables at all quadrature points."""
    qd = 2 * space.degree + 2 if quad_degree is None else quad_degree
    xc = cell_tables(space, qd)["x"]
    xe = edge_tables(space, qd)["x"]
    shp = xc.shape[:2]

    A = np.asarray(problem.A(xc), dtype=float) * np.ones(shp + (2, 2))
    r = np.asarray(problem.r(xc), dtype=float) * np.ones(shp)
    beta = np.asarray(problem.beta(xe), dtype=float) * np.ones(xe.shape)
    s = np.asarray(problem.s(xe), dtype=float) * np.ones(xe.shape[:2])
    b = None
    if problem.b is not None:
        b = np.asarray(problem.b(xc), dtype=float) * np.ones(shp + (2,))
    c = None
    if problem.c is not None:
        c = np.asarray(problem.c(xc), dtype=float) * np.ones(shp)
    return Coefficients(A=A, r=r, beta=beta, s=s, b=b, c=c)


def check_coefficients(space: FESpace, coeffs: Coefficients,
                       strict: bool = True, quad_degree=None) -> None:
    """Verify ellipticity, obliqueness and sign of the zeroth order term.

    With strict=True violations raise; otherwise they warn, which is the
    mode used along Newton iterates where the linearized data may leave
    the admissible set transiently.
    """
    A = coeffs.A
    spd = (A[..., 0, 0] > 0.0) & (
        A[..., 0, 0] * A[..., 1, 1] - A[..., 0, 1] * A[..., 1, 0] > 0.0
    )
    qd = 2 * space.degree + 2 if quad_degree is None else quad_degree
    normals = edge_tables(space, qd)["n"]
    bn = np.einsum("bqd,bd->bq", coeffs.beta, normals)
    problems = []
    if not np.all(spd):
        problems.append((EllipticityError,
                         "diffusion matrix not positive definite at "
                         f"{int((~spd).sum())} quadrature points"))
    if not np.all(bn > 0.0):
        problems.append((ObliquenessError,
                         f"beta . n <= 0 at {int((bn <= 0).sum())} boundary "
                         f"quadrature points (min {bn.min():.3e})"))
    if coeffs.c is not None and np.any(coeffs.c > 0.0):
        problems.append((ValueError, "zeroth order coefficient must be <= 0"))
    for exc, msg in problems:
        if strict:
            raise exc(msg)
        warnings.warn(msg, RuntimeWarning)


def assemble_block_system(space: FESpace, coeffs: Coefficients,
                          recovery: bool = True, ops=None,
                          quad_degree=None) -> BlockSystem:
    """Assemble E z = f for the coupled potential/gradient/Hessian system.

    Layout with gradient recovery: [u | g1 g2 | h11 h12 h22 | c]; rows
    are the PDE+boundary row, the recovery rows (zero right hand side)
    and the zero-mean row.  Without recovery the gradient unknowns are
    dropped and first derivatives act on u directly.
    """
    qd = 2 * space.degree + 2 if quad_degree is None else quad_degree
    if ops is None:
        ops = assembly.cached_operators(space)
    M, A_, R, d = ops.M, ops.A, ops.R, ops.d
    n = space.n_dofs

    # Hessian couplings <[A]_ab Phi_i Phi_j>; h12 carries both off-diagonals
    B11 = assembly.weighted_mass(space, coeffs.A[..., 0, 0], "cells", qd)
    B22 = assembly.weighted_mass(space, coeffs.A[..., 1, 1], "cells", qd)
    B12 = assembly.weighted_mass(
        space, coeffs.A[..., 0, 1] + coeffs.A[..., 1, 0], "cells", qd
    )

    Wc = None
    if coeffs.c is not None:
        Wc = assembly.weighted_mass(space, coeffs.c, "cells", qd)

    f_pde = assembly.load_vector(space, coeffs.r, "cells", qd)
    f_pde += assembly.load_vector(space, coeffs.s, "boundary", qd)
    dcol = sp.csr_matrix(d[:, None])
    zero = None

    if recovery:
        # first order terms act on the recovered gradient components
        C = []
        for a in (0, 1):
            Ca = assembly.weighted_mass(space, coeffs.beta[..., a],
                                        "boundary", qd)
            if coeffs.b is not None:
                Ca = Ca + assembly.weighted_mass(space, coeffs.b[..., a],
                                                 "cells", qd)
            C.append(Ca)
        rows = [
            [Wc, C[0], C[1], B11, B12, B22, dcol],
            [-A_[0], M, zero, zero, zero, zero, zero],
            [-A_[1], zero, M, zero, zero, zero, zero],
            [zero, -R[0], zero, M, zero, zero, zero],
            [zero, -0.5 * R[1], -0.5 * R[0], zero, M, zero, zero],
            [zero, zero, -R[1], zero, zero, M, zero],
            [sp.csr_matrix(d[None, :]), None, None, None, None, None, None],
        ]
        layout = ("u", "g1", "g2", "h11", "h12", "h22", "c")
        f = np.concatenate([f_pde, np.zeros(5 * n + 1)])
    else:
        # first order terms act on the broken gradient of u
        Du = None
        for a in (0, 1):
            T = assembly.weighted_derivative(space, coeffs.beta[..., a], a,
                                             "boundary", qd)
            if coeffs.b is not None:
                T = T + assembly.weighted_derivative(space, coeffs.b[..., a],
                                                     a, "cells", qd)
            Du = T if Du is None else Du + T
        if Wc is not None:
            Du = Du + Wc

        H11u, H12u, H22u = hessian_operators(space)

        rows = [
            [Du, B11, B12, B22, dcol],
            [-H11u, M, zero, zero, zero],
            [-H12u, zero, M, zero, zero],
            [-H22u, zero, zero, M, zero],
            [sp.csr_matrix(d[None, :]), None, None, None, None],
        ]
        layout = ("u", "h11", "h12", "h22", "c")
        f = np.concatenate([f_pde, np.zeros(3 * n + 1)])

    E = sp.bmat(rows, format="csr")
    return BlockSystem(E=E, f=f, n_dofs=n, layout=layout)


def split_solution(system: BlockSystem, z: np.ndarray):
    """Slice the stacked solution vector into named blocks."""
    n = system.n_dofs
    blocks = {}
    for k, name in enumerate(system.layout[:-1]):
        blocks[name] = z[k * n : (k + 1) * n]
    blocks["c"] = float(z[-1])
    return blocks


def solve_oblique(space: FESpace, problem: LinearObliqueProblem,
                  recovery: bool = True, strict: bool = True,
                  method: str = "direct") -> ObliqueResult:
    """Solve the linear oblique problem; returns potential, Hessian and
    the mean multiplier (zero for compatible data)."""
    coeffs = sample_problem(space, problem)
    check_coefficients(space, coeffs, strict=strict)
    system = assemble_block_system(space, coeffs, recovery=recovery)
    z = assembly.solve_sparse(system.E, system.f, method=method)
    blocks = split_solution(system, z)
    g = None
    if recovery:
        g = RecoveredField(space=space,
                           components=np.stack([blocks["g1"], blocks["g2"]]))
    H = RecoveredField(
        space=space,
        components=np.stack([blocks["h11"], blocks["h12"], blocks["h22"]]),
    )
    return ObliqueResult(u=blocks["u"], g=g, H=H, c_mult=blocks["c"])

"""Newton solver for the Monge-Ampere equation with transport boundary
conditions.

The problem det D2u = rho(x) / sigma(grad u) on Omega with the second
boundary condition grad u(Omega) = Y is posed with Y encoded by a
defining function b (negative inside Y, zero on its boundary): the
boundary condition becomes b(grad u) = 0 on the boundary of Omega.  Each
Newton step linearizes both the determinant (through the cofactor
matrix, by the Jacobi formula) and the boundary operator, producing a
linear nondivergence-form problem with oblique boundary data that is
discretized by the coupled potential/gradient/Hessian block system of
`oblique`.  A scalar Lagrange multiplier pins the mean of the potential.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import roots_legendre

from . import assembly
from .fe_space import (
    FESpace,
    cell_tables,
    cell_values,
    cell_gradients,
    edge_tables,
    edge_values,
    edge_gradients,
    interpolate,
)
from .oblique import Coefficients, assemble_block_system, check_coefficients, \
    split_solution
from .recovery import (
    RecoveredField,
    convexity_check,
    fe_hessian,
    fe_hessian_recovered,
    hessian_operators,
    recover_gradient,
)

__all__ = [
    "DefiningFunction",
    "ProblemData",
    "NewtonState",
    "SolveOptions",
    "cofactor",
    "ma_residual",
    "make_circle_target",
    "make_ellipse_target",
    "linearization_data",
    "newton_step",
    "solve_maot",
    "mass_defect",
    "validate_mass",
]


# ---------------------------------------------------------------------------
# target domains


@dataclass(frozen=True)
class DefiningFunction:
    """Target set Y described by b < 0 with outward gradient of unit size.

    `b` and `grad` are vectorized over points of shape (..., 2).  `bbox`
    bounds Y; `area` is the exact area when the shape allows it.
    """

    b: object
    grad: object
    shape: str = "generic"
    params: tuple = ()
    bbox: tuple = (-1.0, 1.0, -1.0, 1.0)
    area: float = None


def make_circle_target(radius: float = 1.0) -> DefiningFunction:
    """Signed distance to the circle of given radius about the origin."""
    if radius <= 0:
        raise ValueError("circle target needs radius > 0")

    def b(p):
        p = np.asarray(p, dtype=float)
        return np.linalg.norm(p, axis=-1) - radius

    def grad(p):
        p = np.asarray(p, dtype=float)
        r = np.linalg.norm(p, axis=-1, keepdims=True)
        out = np.divide(p, r, out=np.zeros_like(p), where=r > 0)
        deg = (r[..., 0] == 0)
        if np.any(deg):
            out[deg] = (1.0, 0.0)  # arbitrary unit direction at the center
        return out

    return DefiningFunction(
        b=b, grad=grad, shape="circle", params=(radius,),
        bbox=(-radius, radius, -radius, radius), area=np.pi * radius ** 2,
    )


def _ellipse_project(p: np.ndarray, a: float, bb: float) -> np.ndarray:
    """Closest points on the ellipse (x/a)^2 + (y/bb)^2 = 1.

    Works in the folded quadrant with the Lagrange-multiplier form of the
    closest point, q = (px a^2/(w+a^2-m), py bb^2/(w+bb^2-m)) with
    m = min(a^2, bb^2), where the shifted multiplier w > 0 is the unique
    root of the monotone on-curve condition F(w) = (x(w)/a)^2 +
    (y(w)/bb)^2 - 1.  Bisection on the guaranteed bracket cannot diverge;
    working with w rather than the raw multiplier keeps the pole term
    px a^2/w full-precision for near-axis queries (whose nearest point
    stays O(a) away while w -> 0).
    """
    p = np.atleast_2d(np.asarray(p, dtype=float))
    sgn = np.where(p < 0, -1.0, 1.0)      # zeros fold to +; either tie is a
    pf = np.abs(p)                        # valid closest point by symmetry
    eps = 1e-13 * max(a, bb)
    pf = np.maximum(pf, eps)              # nudge off the symmetry axes
    m = min(a * a, bb * bb)
    shift = np.array([a * a - m, bb * bb - m])
    num = pf * np.array([a, bb])          # (n, 2): px*a, py*bb

    def curve_defect(w):
        r = num / (w[:, None] + shift)
        return r[:, 0] ** 2 + r[:, 1] ** 2 - 1.0

    # F(lo) >= 3 by the pole term alone; F decreases to -1 as w grows.
    pole = num[:, 0] if shift[0] == 0.0 else num[:, 1]
    lo = 0.5 * pole
    hi = np.full(len(pf), m + 2.0 * (a + bb) * (pf.max() + a + bb))
    for _ in range(100):                  # geometric phase: close the scales
        if np.all(hi <= 2.0 * lo):
            break
        mid = np.sqrt(lo * hi)
        up = curve_defect(mid) > 0.0
        lo = np.where(up, mid, lo)
        hi = np.where(up, hi, mid)
    for _ in range(60):                   # arithmetic phase: full precision
        if np.all(hi - lo <= 4.0 * np.spacing(hi)):
            break
        mid = 0.5 * (lo + hi)
        up = curve_defect(mid) > 0.0
        lo = np.where(up, mid, lo)
        hi = np.where(up, hi, mid)
    w = 0.5 * (lo + hi)
    q = pf * np.array([a * a, bb * bb]) / (w[:, None] + shift)
    return sgn * q


def make_ellipse_target(a: float, b_axis: float) -> DefiningFunction:
    """Signed distance to the ellipse (x/a)^2 + (y/b_axis)^2 = 1."""
    if a <= 0 or b_axis <= 0:
        raise ValueError("ellipse target needs positive semiaxes")

    def _signed(p):
        p = np.asarray(p, dtype=float)
        flat = p.reshape(-1, 2)
        q = _ellipse_project(flat, a, b_axis)
        dist = np.linalg.norm(flat - q, axis=-1)
        inside = (flat[:, 0] / a) ** 2 + (flat[:, 1] / b_axis) ** 2 < 1.0
        sd = np.where(inside, -dist, dist)
        return sd.reshape(p.shape[:-1]), q, dist, inside

    def b(p):
        return _signed(p)[0]

    def grad(p):
        p = np.asarray(p, dtype=float)
        flat = p.reshape(-1, 2)
        _, q, dist, inside = _signed(p)
        dirn = np.zeros_like(flat)
        ok = dist > 1e-12 * max(a, b_axis)
        dirn[ok] = (flat[ok] - q[ok]) / dist[ok, None]
        dirn[inside] *= -1.0
        if np.any(~ok):
            # on the ellipse: outward normal from the level set gradient
            nrm = np.stack(
                [q[~ok, 0] / a ** 2, q[~ok, 1] / b_axis ** 2], axis=-1
            )
            dirn[~ok] = nrm / np.linalg.norm(nrm, axis=-1, keepdims=True)
        return dirn.reshape(p.shape)

    return DefiningFunction(
        b=b, grad=grad, shape="ellipse", params=(a, b_axis),
        bbox=(-a, a, -b_axis, b_axis), area=np.pi * a * b_axis,
    )


def make_square_target(side: float = 1.0) -> DefiningFunction:
    """Max-norm defining function of the axis-aligned square (-side/2, side/2)^2.

    b(p) = max(|p1|, |p2|) - side/2 is negative inside, zero on the
    boundary, and its gradient is the unit outward normal of the nearest
    face.  Ties along the diagonals go to the face of the larger signed
    coordinate (x on the diagonal p1 = p2), which keeps the normal
    single-valued; the corners themselves are a measure-zero set that the
    boundary quadrature never hits exactly.  Not smooth, so expect the
    oblique row to see kinks when boundary images cross a diagonal.
    """
    if side <= 0:
        raise ValueError("square target needs side > 0")
    half = 0.5 * side

    def b(p):
        p = np.asarray(p, dtype=float)
        return np.max(np.abs(p), axis=-1) - half

    def grad(p):
        p = np.asarray(p, dtype=float)
        a1, a2 = np.abs(p[..., 0]), np.abs(p[..., 1])
        pick_y = (a2 > a1) | ((a2 == a1) & (p[..., 1] > p[..., 0]))
        s1 = np.where(p[..., 0] >= 0.0, 1.0, -1.0)
        s2 = np.where(p[..., 1] >= 0.0, 1.0, -1.0)
        n = np.zeros_like(p)
        n[..., 0] = np.where(pick_y, 0.0, s1)
        n[..., 1] = np.where(pick_y, s2, 0.0)
        return n

    return DefiningFunction(
        b=b, grad=grad, shape="square", params=(side,),
        bbox=(-half, half, -half, half), area=side * side,
    )


# ---------------------------------------------------------------------------
# problem data


@dataclass(frozen=True)
class ProblemData:
    """Densities and target of one transport problem.

    rho is a function of points in Omega; sigma and grad_sigma are
    functions of gradient values (points in and around Y).  rho_total
    may supply the exact integral of rho over Omega when quadrature on
    the mesh would not resolve it (pixel densities).
    """

    rho: object
    sigma: object
    grad_sigma: object
    target: DefiningFunction
    rho_total: float = None
    name: str = ""


def cofactor(M: np.ndarray) -> np.ndarray:
    """Cofactor matrix of 2x2 matrices, vectorized over leading axes."""
    M = np.asarray(M, dtype=float)
    out = np.empty_like(M)
    out[..., 0, 0] = M[..., 1, 1]
    out[..., 0, 1] = -M[..., 1, 0]
    out[..., 1, 0] = -M[..., 0, 1]
    out[..., 1, 1] = M[..., 0, 0]
    return out


def _det2(M: np.ndarray) -> np.ndarray:
    return M[..., 0, 0] * M[..., 1, 1] - M[..., 0, 1] * M[..., 1, 0]


def ma_residual(H: np.ndarray, p: np.ndarray, x: np.ndarray,
                data: ProblemData) -> np.ndarray:
    """Pointwise Monge-Ampere defect det H - rho(x) / sigma(p)."""
    sig = np.asarray(data.sigma(p), dtype=float)
    if np.any(sig <= 0.0):
        raise ValueError("sigma must be positive at the sampled gradients")
    return _det2(H) - np.asarray(data.rho(x), dtype=float) / sig


# ---------------------------------------------------------------------------
# Newton iteration


@dataclass(frozen=True)
class NewtonState:
    """One iterate: potential, gradient, Hessian, multiplier, residual.

    g is None for the plain scheme (broken gradients are used instead).
    """

    u: np.ndarray
    g: object
    H: RecoveredField
    c: float
    residual: float
    iterations: int
    converged: bool = False
    status: str = "iterating"


@dataclass(frozen=True)
class SolveOptions:
    tol: float = 1e-8
    itermax: int = 30
    damping: bool = True
    recovery: str = "recovered"  # or "plain"
    validate: bool = True
    verbose: bool = False
    safeguard: bool = False  # clip linearized coefficients (rough data)


def initial_state(space: FESpace, data: ProblemData, u0=None,
                  recovery: str = "recovered", ops=None) -> NewtonState:
    """Mean-zero convex starting guess with consistent gradient and
    Hessian fields.

    The default is |x|^2 / 2, whose gradient is the identity map: it
    carries the source into the unit disk, so for the usual targets the
    starting boundary images sit strictly inside Y.  Approaching the
    target from inside matters more than starting close: guesses whose
    gradient image already touches the target boundary (area- or
    moment-matched quadratics) can land the iteration on a
    near-singular shell of the linearized operator, where boundary
    oscillations of the recovered Hessian are almost invisible to the
    tested equation and damped Newton creeps or cycles.
    """
    ops = assembly.cached_operators(space) if ops is None else ops
    if u0 is None:
        u0 = interpolate(
            space, lambda x: 0.5 * (x[:, 0] ** 2 + x[:, 1] ** 2))
    u0 = np.asarray(u0, dtype=float).copy()
    area = ops.d.sum()
    u0 -= (ops.d @ u0) / area
    if recovery == "recovered":
        g = recover_gradient(space, u0, ops)
        H = fe_hessian_recovered(space, g, ops)
    else:
        g = None
        H = fe_hessian(space, u0, ops)
    return NewtonState(u=u0, g=g, H=H, c=0.0, residual=np.inf, iterations=0)


def _state_fields(space, state, data, qd, recovery):
    """Gradient and Hessian values at cell and facet quadrature points."""
    if recovery == "recovered":
        g1, g2 = state.g.components
        Gc = np.stack([cell_values(space, g1, qd),
                       cell_values(space, g2, qd)], axis=-1)
        Ge = np.stack([edge_values(space, g1, qd),
                       edge_values(space, g2, qd)], axis=-1)
    else:
        Gc = cell_gradients(space, state.u, qd)
        Ge = edge_gradients(space, state.u, qd)
    h11, h12, h22 = state.H.components
    Hc = np.empty(Gc.shape[:2] + (2, 2))
    Hc[..., 0, 0] = cell_values(space, h11, qd)
    Hc[..., 0, 1] = Hc[..., 1, 0] = cell_values(space, h12, qd)
    Hc[..., 1, 1] = cell_values(space, h22, qd)
    return Gc, Ge, Hc


def _clip_spd(A: np.ndarray, floor_ratio: float) -> np.ndarray:
    """Raise the eigenvalues of symmetric 2x2 fields to a positive floor.

    The floor is floor_ratio * max(|eigenvalues|, 1) per point, so healthy
    matrices pass through unchanged and indefinite or degenerate ones are
    replaced by their nearest safely-definite modification.
    """
    mean = 0.5 * (A[..., 0, 0] + A[..., 1, 1])
    gap = np.sqrt(0.25 * (A[..., 0, 0] - A[..., 1, 1]) ** 2
                  + A[..., 0, 1] ** 2)
    lo, hi = mean - gap, mean + gap
    floor = floor_ratio * np.maximum(np.maximum(np.abs(lo), np.abs(hi)), 1.0)
    lo_c, hi_c = np.maximum(lo, floor), np.maximum(hi, floor)
    if np.all(lo_c == lo) and np.all(hi_c == hi):
        return A
    # rebuild from the (unchanged) eigenvectors and clipped eigenvalues
    out = np.array(A, copy=True)
    safe = np.where(gap > 0.0, gap, 1.0)
    c2 = np.where(gap > 0.0,
                  0.5 * (A[..., 0, 0] - A[..., 1, 1]) / safe, 1.0)
    s2 = np.where(gap > 0.0, A[..., 0, 1] / safe, 0.0)
    mean_c, gap_c = 0.5 * (hi_c + lo_c), 0.5 * (hi_c - lo_c)
    out[..., 0, 0] = mean_c + gap_c * c2
    out[..., 1, 1] = mean_c - gap_c * c2
    out[..., 0, 1] = gap_c * s2
    out[..., 1, 0] = gap_c * s2
    return out


def _clip_oblique(beta: np.ndarray, normals: np.ndarray,
                  floor_ratio: float) -> np.ndarray:
    """Tilt boundary directions so that beta . n stays uniformly positive.

    Directions with beta . n < floor_ratio * |beta| get the deficit added
    along the facet normal; already-oblique directions are untouched.
    """
    bn = np.einsum("bqd,bd->bq", beta, normals)
    floor = floor_ratio * np.maximum(
        np.linalg.norm(beta, axis=-1), 1e-30)
    deficit = np.maximum(floor - bn, 0.0)
    if not np.any(deficit > 0.0):
        return beta
    return beta + deficit[..., None] * normals[:, None, :]


def linearization_data(space: FESpace, state: NewtonState, data: ProblemData,
                       recovery: str = "recovered",
                       quad_degree=None, safeguard: bool = False) -> Coefficients:
    """Oblique-problem data of one Newton step, sampled at quadrature points.

    Diffusion is the cofactor of the current Hessian (Jacobi formula),
    the drift comes from differentiating rho / sigma(grad u), the
    boundary direction is grad b at the current gradient, and the right
    hand sides carry the negative nonlinear residual (the current
    multiplier is folded into the volume part).

    With safeguard on (an opt-in for rough data), ellipticity and
    obliqueness of the *linearized* operator are enforced by
    eigenvalue/normal-component floors.  Only the Newton direction is
    modified: the residual data r, s stay exact, so fixed points are
    unchanged, and near a strictly convex solution the floors are
    inactive and the step is the exact Newton step.  The benchmark
    problems never need it.
    """
    qd = 2 * space.degree + 2 if quad_degree is None else quad_degree
    Xc = cell_tables(space, qd)["x"]
    Gc, Ge, Hc = _state_fields(space, state, data, qd, recovery)

    sig = np.asarray(data.sigma(Gc), dtype=float)
    if np.any(sig <= 0.0):
        raise ValueError("sigma must be positive along the current iterate")
    rho = np.asarray(data.rho(Xc), dtype=float)
    A = cofactor(Hc)
    bhat = (rho / sig ** 2)[..., None] * np.asarray(
        data.grad_sigma(Gc), dtype=float
    ) * np.ones(Gc.shape)
    rhat = rho / sig - _det2(Hc) - state.c
    beta = np.asarray(data.target.grad(Ge), dtype=float) * np.ones(Ge.shape)
    shat = -np.asarray(data.target.b(Ge), dtype=float)
    if safeguard:
        A = _clip_spd(A, 1e-2)
        normals = edge_tables(space, qd)["n"]
        beta = _clip_oblique(beta, normals, 5e-2)
    return Coefficients(A=A, r=rhat, beta=beta, s=shat, b=bhat, c=None)


def residual_norm(space: FESpace, state: NewtonState, data: ProblemData,
                  recovery: str = "recovered", ops=None,
                  quad_degree=None) -> float:
    """Sup norm of the assembled nonlinear residual vector.

    Collects the tested Monge-Ampere defect plus multiplier, the tested
    boundary defect b(grad u), the recovery-equation residuals and the
    mean constraint.
    """
    qd = 2 * space.degree + 2 if quad_degree is None else quad_degree
    ops = assembly.cached_operators(space) if ops is None else ops
    Xc = cell_tables(space, qd)["x"]
    Gc, Ge, Hc = _state_fields(space, state, data, qd, recovery)
    F = ma_residual(Hc, Gc, Xc, data) + state.c
    res = assembly.load_vector(space, F, "cells", qd)
    res += assembly.load_vector(
        space, np.asarray(data.target.b(Ge), dtype=float), "boundary", qd
    )
    parts = [res]
    if recovery == "recovered":
        g1, g2 = state.g.components
        parts.append(ops.M @ g1 - ops.A[0] @ state.u)
        parts.append(ops.M @ g2 - ops.A[1] @ state.u)
        h11, h12, h22 = state.H.components
        parts.append(ops.M @ h11 - ops.R[0] @ g1)
        parts.append(ops.M @ h12 - 0.5 * (ops.R[0] @ g2 + ops.R[1] @ g1))
        parts.append(ops.M @ h22 - ops.R[1] @ g2)
    else:
        T11, T12, T22 = hessian_operators(space)
        h11, h12, h22 = state.H.components
        parts.append(ops.M @ h11 - T11 @ state.u)
        parts.append(ops.M @ h12 - T12 @ state.u)
        parts.append(ops.M @ h22 - T22 @ state.u)
    parts.append(np.array([ops.d @ state.u]))
    return float(max(np.abs(p).max() for p in parts))


def _advance(space, state, blocks, lam, recovery, ops):
    """State update u += lam theta etc. for one damped Newton candidate."""
    u = state.u + lam * blocks["u"]
    if recovery == "recovered":
        g = RecoveredField(
            space=space,
            components=state.g.components + lam * np.stack(
                [blocks["g1"], blocks["g2"]]
            ),
        )
    else:
        g = None
    H = RecoveredField(
        space=space,
        components=state.H.components + lam * np.stack(
            [blocks["h11"], blocks["h12"], blocks["h22"]]
        ),
    )
    c = state.c + lam * blocks["c"]
    return replace(state, u=u, g=g, H=H, c=c)


_DAMPING_LADDER = (1.0, 0.5, 0.25, 0.125)


def newton_step(space: FESpace, state: NewtonState, data: ProblemData,
                recovery: str = "recovered", damping: bool = True,
                ops=None, safeguard: bool = False) -> NewtonState:
    """One (optionally damped) Newton update of the full state.

    Solves the linearized oblique block system for the increments of
    (u, g, H, c) and accepts the first step fraction from the halving
    ladder 1, 1/2, 1/4, 1/8 that does not increase the residual sup
    norm; if none qualifies the best candidate is taken.
    """
    ops = assembly.cached_operators(space) if ops is None else ops
    coeffs = linearization_data(space, state, data, recovery,
                                safeguard=safeguard)
    check_coefficients(space, coeffs, strict=False)
    system = assemble_block_system(
        space, coeffs, recovery=(recovery == "recovered"), ops=ops
    )
    z = assembly.solve_sparse(system.E, system.f)
    blocks = split_solution(system, z)

    r0 = state.residual
    ladder = _DAMPING_LADDER if damping else (1.0,)
    best = None
    for lam in ladder:
        candidate = _advance(space, state, blocks, lam, recovery, ops)
        r = residual_norm(space, candidate, data, recovery, ops)
        if best is None or r < best[1]:
            best = (candidate, r)
        if r <= r0:
            best = (candidate, r)
            break
    candidate, r = best

    if recovery == "recovered":
        drift = max(
            np.abs(ops.M @ candidate.g.components[a]
                   - ops.A[a] @ candidate.u).max()
            for a in (0, 1)
        )
        scale = 1.0 + np.abs(candidate.u).max()
        if drift > 1e-9 * scale:
            warnings.warn(
                f"recovery consistency drift {drift:.2e}", RuntimeWarning
            )
    return replace(
        candidate, residual=r, iterations=state.iterations + 1
    )


def solve_maot(space: FESpace, data: ProblemData, options: SolveOptions = None,
               u0=None) -> NewtonState:
    """Damped Newton iteration for the discrete transport problem.

    Stops when the residual sup norm drops below tol; reports
    non-convergence (status and converged flag) when the iteration
    budget is exhausted, the residual grows three damped steps in a row,
    or the linearized system becomes unsolvable.
    """
    options = SolveOptions() if options is None else options
    if options.recovery not in ("recovered", "plain"):
        raise ValueError("recovery must be 'recovered' or 'plain'")
    if options.validate:
        validate_mass(data, space.mesh)
    ops = assembly.cached_operators(space)
    state = initial_state(space, data, u0, options.recovery, ops)
    state = replace(
        state,
        residual=residual_norm(space, state, data, options.recovery, ops),
    )
    warned_convexity = False
    grow = 0
    while True:
        if options.verbose:
            print(f"  iter {state.iterations:3d}  residual {state.residual:.3e}")
        if state.residual <= options.tol:
            return replace(state, converged=True, status="converged")
        if state.iterations >= options.itermax:
            return replace(state, status="itermax")
        try:
            new_state = newton_step(
                space, state, data, options.recovery, options.damping, ops,
                safeguard=options.safeguard,
            )
        except (assembly.SolverError, ValueError, RuntimeError) as exc:
            return replace(state, status=f"failed: {exc}")
        if not np.isfinite(new_state.residual):
            return replace(new_state, status="diverged")
        if not convexity_check(space, new_state.H) and not warned_convexity:
            warnings.warn(
                "iterate lost discrete convexity; continuing", RuntimeWarning
            )
            warned_convexity = True
        grow = grow + 1 if new_state.residual > state.residual else 0
        if grow >= 3:
            return replace(new_state, status="diverged")
        state = new_state


# ---------------------------------------------------------------------------
# mass compatibility


def _disk_rule(radius: float, center=(0.0, 0.0), n_r: int = 48,
               n_t: int = 256):
    """High-order product rule on a disk (Gauss in r, periodic in t)."""
    xr, wr = roots_legendre(n_r)
    r = 0.5 * (xr + 1.0)
    wr = 0.5 * wr
    t = np.arange(n_t) * (2.0 * np.pi / n_t)
    wt = np.full(n_t, 2.0 * np.pi / n_t)
    R, T = np.meshgrid(r, t, indexing="ij")
    W = np.outer(wr * r, wt) * radius ** 2
    pts = np.stack(
        [center[0] + radius * R * np.cos(T),
         center[1] + radius * R * np.sin(T)], axis=-1
    )
    return pts.reshape(-1, 2), W.ravel()


def _square_rule(side: float, center=(0.0, 0.0), n: int = 64):
    x, w = roots_legendre(n)
    x = 0.5 * side * x
    w = 0.5 * side * w
    X, Y = np.meshgrid(x, x, indexing="ij")
    W = np.outer(w, w)
    pts = np.stack([center[0] + X, center[1] + Y], axis=-1)
    return pts.reshape(-1, 2), W.ravel()


def _target_mass(data: ProblemData, grid: int = 1024) -> float:
    """Integral of sigma over the target Y."""
    tgt = data.target
    if tgt.shape == "circle":
        pts, w = _disk_rule(tgt.params[0])
    elif tgt.shape == "ellipse":
        a, bb = tgt.params
        pts, w = _disk_rule(1.0)
        w = w * (a * bb)
        pts = pts * np.array([a, bb])
    elif tgt.shape == "square":
        pts, w = _square_rule(tgt.params[0])
    else:
        # structured midpoint estimate on the bounding box, O(1/grid)
        x0, x1, y0, y1 = tgt.bbox
        xs = x0 + (np.arange(grid) + 0.5) * (x1 - x0) / grid
        ys = y0 + (np.arange(grid) + 0.5) * (y1 - y0) / grid
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        pts = np.stack([X.ravel(), Y.ravel()], axis=-1)
        inside = np.asarray(tgt.b(pts)) < 0.0
        cell = (x1 - x0) * (y1 - y0) / grid ** 2
        sig = np.asarray(data.sigma(pts), dtype=float) * np.ones(len(pts))
        return float((sig * inside).sum() * cell)
    sig = np.asarray(data.sigma(pts), dtype=float) * np.ones(len(pts))
    return float(sig @ w)


def _source_mass(data: ProblemData, mesh) -> float:
    """Integral of rho over Omega (the true domain, not its polygon)."""
    if data.rho_total is not None:
        return float(data.rho_total)
    if mesh.domain == "disk":
        pts, w = _disk_rule(mesh.radius)
    elif mesh.domain == "square":
        lo = mesh.vertices.min(axis=0)
        hi = mesh.vertices.max(axis=0)
        pts, w = _square_rule(float((hi - lo)[0]),
                              center=tuple(0.5 * (lo + hi)))
    else:
        # polygonal mesh is the exact domain; midpoint rule per cell
        pts = mesh.vertices[mesh.cells].mean(axis=1)
        w = mesh.cell_areas()
    rho = np.asarray(data.rho(pts), dtype=float) * np.ones(len(pts))
    return float(rho @ w)


def mass_defect(data: ProblemData, mesh) -> float:
    """Relative mass imbalance |int rho - int sigma| / int rho."""
    mr = _source_mass(data, mesh)
    mt = _target_mass(data)
    return abs(mr - mt) / abs(mr)


def validate_mass(data: ProblemData, mesh, tol: float = 1e-6) -> None:
    """Check the transport compatibility condition int rho = int sigma.

    Tagged shapes are integrated with high-order product rules and
    checked at `tol`; generic targets fall back to a structured estimate
    whose own error dominates, so only gross imbalance is rejected.
    """
    defect = mass_defect(data, mesh)
    if data.target.shape == "generic":
        if defect > 1e-2:
            raise ValueError(
                f"transport data violates mass balance (defect {defect:.2e})"
            )
        return
    if defect > tol:
        raise ValueError(
            f"transport data violates mass balance (defect {defect:.2e})"
        )

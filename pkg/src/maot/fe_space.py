"""Lagrange finite element spaces of degree 1, 2, 3 on triangulations.

The nodal basis on the reference triangle is built by inverting a
monomial Vandermonde matrix at the reference nodes, so one code path
covers all degrees.  Quadrature on the reference triangle is a conical
product of Gauss-Jacobi and Gauss-Legendre rules, exact to any requested
degree by construction; facet quadrature is plain Gauss-Legendre.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

__all__ = [
    "FESpace",
    "QuadratureRule",
    "build_space",
    "eval_basis",
    "interpolate",
    "cell_quadrature",
    "edge_quadrature",
    "cell_values",
    "cell_gradients",
    "edge_values",
    "edge_gradients",
    "locate_points",
    "eval_function",
]

# local edges of the reference triangle, counterclockwise
_LOCAL_EDGES = ((0, 1), (1, 2), (2, 0))


def _monomial_exponents(degree: int):
    return [(a, b) for total in range(degree + 1) for a in range(total + 1)
            for b in [total - a]]


def _reference_nodes(degree: int) -> np.ndarray:
    """Reference-cell nodes in (xi, eta): vertices, edge nodes, interior."""
    verts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    nodes = [verts[i] for i in range(3)]
    for a, b in _LOCAL_EDGES:
        for s in range(1, degree):
            t = s / degree
            nodes.append((1.0 - t) * verts[a] + t * verts[b])
    if degree >= 3:
        nodes.append(verts.mean(axis=0))
    return np.asarray(nodes)


def _vandermonde(points: np.ndarray, exponents) -> np.ndarray:
    cols = [points[:, 0] ** a * points[:, 1] ** b for a, b in exponents]
    return np.stack(cols, axis=1)


class _ReferenceBasis:
    """Nodal basis on the reference triangle for one degree."""

    def __init__(self, degree: int):
        self.degree = degree
        self.exponents = _monomial_exponents(degree)
        self.nodes = _reference_nodes(degree)
        self.n_local = len(self.nodes)
        V = _vandermonde(self.nodes, self.exponents)
        self.coeffs = np.linalg.inv(V)  # columns: basis functions

    def eval(self, points: np.ndarray):
        """Values and (xi, eta)-gradients at reference points.

        Returns (values (q, n_local), grads (q, n_local, 2)).
        """
        points = np.atleast_2d(points)
        V = _vandermonde(points, self.exponents)
        x, y = points[:, 0], points[:, 1]
        Dx = np.stack(
            [a * np.where(a > 0, x ** max(a - 1, 0), 0.0) * y ** b
             for a, b in self.exponents], axis=1)
        Dy = np.stack(
            [b * x ** a * np.where(b > 0, y ** max(b - 1, 0), 0.0)
             for a, b in self.exponents], axis=1)
        values = V @ self.coeffs
        grads = np.stack([Dx @ self.coeffs, Dy @ self.coeffs], axis=2)
        return values, grads


_REFERENCE_BASES: dict[int, _ReferenceBasis] = {}


def _reference_basis(degree: int) -> _ReferenceBasis:
    if degree not in _REFERENCE_BASES:
        _REFERENCE_BASES[degree] = _ReferenceBasis(degree)
    return _REFERENCE_BASES[degree]


@dataclass(frozen=True)
class QuadratureRule:
    """Quadrature points and weights on a reference element.

    Cell rules live on the unit triangle (weights sum to 1/2), edge
    rules on the unit segment (weights sum to 1).
    """

    points: np.ndarray
    weights: np.ndarray
    exactness: int


def cell_quadrature(degree: int) -> QuadratureRule:
    """Conical product rule on the reference triangle, exact to `degree`."""
    n = max(1, (degree + 2) // 2)
    xj, wj = roots_jacobi(n, 1.0, 0.0)  # weight (1 - x) on [-1, 1]
    xl, wl = roots_legendre(n)
    xj = 0.5 * (xj + 1.0)
    wj = wj / 4.0  # maps weight (1-x) dx on [-1,1] to (1-x) dx on [0,1]
    xl = 0.5 * (xl + 1.0)
    wl = wl / 2.0
    pts = np.array([(x, e * (1.0 - x)) for x in xj for e in xl])
    wts = np.array([a * b for a in wj for b in wl])
    return QuadratureRule(points=pts, weights=wts, exactness=degree)


def edge_quadrature(degree: int) -> QuadratureRule:
    """Gauss-Legendre rule on [0, 1], exact to `degree`."""
    n = max(1, (degree + 2) // 2)
    x, w = roots_legendre(n)
    return QuadratureRule(
        points=0.5 * (x + 1.0), weights=0.5 * w, exactness=degree
    )


@dataclass(frozen=True)
class FESpace:
    """Continuous Lagrange space of degree k on a mesh.

    Attributes
    ----------
    mesh : Mesh
    degree : int
    cell_dofs : (nc, n_local) int array
        Global dof indices per cell, matching the reference node order
        (vertices, then edge nodes, then the interior node for k = 3).
        Edge dofs are globally keyed by the sorted vertex pair and
        ordered from the smaller to the larger vertex index, so
        neighbouring cells agree on shared dofs.
    dof_coords : (N, 2) float array
    """

    mesh: object
    degree: int
    cell_dofs: np.ndarray
    dof_coords: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_dofs(self) -> int:
        return self.dof_coords.shape[0]


def build_space(mesh, degree: int) -> FESpace:
    if degree not in (1, 2, 3):
        raise ValueError("degree must be 1, 2 or 3")
    cells = mesh.cells
    nv = mesh.n_vertices
    nc = mesh.n_cells

    edges = np.concatenate(
        [cells[:, [a, b]] for a, b in _LOCAL_EDGES], axis=0
    )
    key = np.sort(edges, axis=1)
    uniq, inverse = np.unique(key, axis=0, return_inverse=True)
    ne = len(uniq)
    edge_of_cell = inverse.reshape(3, nc).T  # (nc, 3) global edge ids

    per_edge = degree - 1
    n_local = 3 + 3 * per_edge + (1 if degree >= 3 else 0)
    cell_dofs = np.empty((nc, n_local), dtype=np.int64)
    cell_dofs[:, :3] = cells

    for le, (a, b) in enumerate(_LOCAL_EDGES):
        eids = edge_of_cell[:, le]
        base = nv + per_edge * eids
        if per_edge == 1:
            cell_dofs[:, 3 + le] = base
        elif per_edge == 2:
            # local node order runs a -> b; global order runs from the
            # smaller vertex id, so swap when the cell traverses the
            # edge backwards
            forward = cells[:, a] < cells[:, b]
            cell_dofs[:, 3 + 2 * le] = np.where(forward, base, base + 1)
            cell_dofs[:, 3 + 2 * le + 1] = np.where(forward, base + 1, base)
    if degree >= 3:
        cell_dofs[:, -1] = nv + per_edge * ne + np.arange(nc)

    n_dofs = nv + per_edge * ne + (nc if degree >= 3 else 0)
    coords = np.zeros((n_dofs, 2))
    coords[:nv] = mesh.vertices
    if per_edge == 1:
        coords[nv : nv + ne] = 0.5 * (
            mesh.vertices[uniq[:, 0]] + mesh.vertices[uniq[:, 1]]
        )
    elif per_edge == 2:
        va, vb = mesh.vertices[uniq[:, 0]], mesh.vertices[uniq[:, 1]]
        coords[nv : nv + 2 * ne : 2] = va + (vb - va) / 3.0
        coords[nv + 1 : nv + 2 * ne : 2] = va + 2.0 * (vb - va) / 3.0
    if degree >= 3:
        coords[nv + per_edge * ne :] = mesh.vertices[cells].mean(axis=1)

    return FESpace(
        mesh=mesh, degree=degree, cell_dofs=cell_dofs, dof_coords=coords
    )


def _cell_geometry(space: FESpace):
    """Per-cell affine data: Jacobians, inverses, determinants."""
    if "geom" not in space._cache:
        v = space.mesh.vertices
        c = space.mesh.cells
        J = np.stack(
            [v[c[:, 1]] - v[c[:, 0]], v[c[:, 2]] - v[c[:, 0]]], axis=2
        )  # (nc, 2, 2), columns are edge vectors
        detJ = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        Jinv = np.empty_like(J)
        Jinv[:, 0, 0] = J[:, 1, 1] / detJ
        Jinv[:, 0, 1] = -J[:, 0, 1] / detJ
        Jinv[:, 1, 0] = -J[:, 1, 0] / detJ
        Jinv[:, 1, 1] = J[:, 0, 0] / detJ
        space._cache["geom"] = (J, Jinv, detJ)
    return space._cache["geom"]


def eval_basis(space: FESpace, cell: int, points: np.ndarray):
    """Basis values and physical gradients at reference points of a cell.

    Parameters
    ----------
    points : (q, 2) array of (xi, eta) reference coordinates.

    Returns
    -------
    values : (q, n_local)
    grads : (q, n_local, 2) gradients in physical coordinates.
    """
    basis = _reference_basis(space.degree)
    values, ref_grads = basis.eval(points)
    _, Jinv, _ = _cell_geometry(space)
    grads = np.einsum("qid,de->qie", ref_grads, Jinv[cell])
    return values, grads


def interpolate(space: FESpace, f) -> np.ndarray:
    """Nodal interpolant: evaluate f at the dof coordinates."""
    vals = np.asarray(f(space.dof_coords), dtype=float)
    if vals.shape != (space.n_dofs,):
        raise ValueError("interpolated function must return one value per point")
    return vals


# ---------------------------------------------------------------------------
# precomputed tables used by the assembly routines


def cell_tables(space: FESpace, quad_degree: int):
    """Quadrature tables over all cells.

    Returns a dict with
      w      (nc, q)            physical quadrature weights
      x      (nc, q, 2)         physical quadrature points
      val    (q, n_local)       basis values (cell independent)
      grad   (nc, q, n_local, 2) physical basis gradients
    """
    key = ("cell_tables", quad_degree)
    if key not in space._cache:
        rule = cell_quadrature(quad_degree)
        basis = _reference_basis(space.degree)
        values, ref_grads = basis.eval(rule.points)
        J, Jinv, detJ = _cell_geometry(space)
        v0 = space.mesh.vertices[space.mesh.cells[:, 0]]
        x = v0[:, None, :] + np.einsum("cde,qe->cqd", J, rule.points)
        w = rule.weights[None, :] * detJ[:, None]
        grad = np.einsum("qid,cde->cqie", ref_grads, Jinv)
        space._cache[key] = {"w": w, "x": x, "val": values, "grad": grad}
    return space._cache[key]


def edge_tables(space: FESpace, quad_degree: int):
    """Quadrature tables over boundary facets.

    Returns a dict with
      w      (nb, q)            physical quadrature weights (arc length)
      x      (nb, q, 2)         physical quadrature points
      n      (nb, 2)            outward unit normals
      val    (nb, q, n_local)   basis values of the owning cell
      grad   (nb, q, n_local, 2) physical basis gradients of the owning cell
      cells  (nb,)              owning cells
    """
    key = ("edge_tables", quad_degree)
    if key not in space._cache:
        mesh = space.mesh
        rule = edge_quadrature(quad_degree)
        basis = _reference_basis(space.degree)
        _, Jinv, _ = _cell_geometry(space)
        ref_verts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])

        nb = len(mesh.boundary_edges)
        q = len(rule.points)
        w = np.empty((nb, q))
        x = np.empty((nb, q, 2))
        val = np.empty((nb, q, basis.n_local))
        grad = np.empty((nb, q, basis.n_local, 2))

        for fi in range(nb):
            a, b = mesh.boundary_edges[fi]
            cell = mesh.boundary_cells[fi]
            cv = mesh.cells[cell]
            la = int(np.where(cv == a)[0][0])
            lb = int(np.where(cv == b)[0][0])
            t = rule.points
            ref_pts = (1.0 - t)[:, None] * ref_verts[la] + t[:, None] * ref_verts[lb]
            pa, pb = mesh.vertices[a], mesh.vertices[b]
            length = np.linalg.norm(pb - pa)
            w[fi] = rule.weights * length
            x[fi] = (1.0 - t)[:, None] * pa + t[:, None] * pb
            values, ref_grads = basis.eval(ref_pts)
            val[fi] = values
            grad[fi] = np.einsum("qid,de->qie", ref_grads, Jinv[cell])

        space._cache[key] = {
            "w": w,
            "x": x,
            "n": mesh.boundary_normals,
            "val": val,
            "grad": grad,
            "cells": mesh.boundary_cells,
        }
    return space._cache[key]


# ---------------------------------------------------------------------------
# evaluation of finite element functions given by coefficient vectors


def cell_values(space: FESpace, u: np.ndarray, quad_degree: int) -> np.ndarray:
    """Values of the FE function u at all cell quadrature points: (nc, q)."""
    tab = cell_tables(space, quad_degree)
    return np.einsum("ci,qi->cq", u[space.cell_dofs], tab["val"])


def cell_gradients(space: FESpace, u: np.ndarray, quad_degree: int) -> np.ndarray:
    """Gradients of u at all cell quadrature points: (nc, q, 2)."""
    tab = cell_tables(space, quad_degree)
    return np.einsum("ci,cqid->cqd", u[space.cell_dofs], tab["grad"])


def edge_values(space: FESpace, u: np.ndarray, quad_degree: int) -> np.ndarray:
    """Values of u at the boundary facet quadrature points: (nb, q)."""
    tab = edge_tables(space, quad_degree)
    dofs = space.cell_dofs[space.mesh.boundary_cells]
    return np.einsum("bi,bqi->bq", u[dofs], tab["val"])


def edge_gradients(space: FESpace, u: np.ndarray, quad_degree: int) -> np.ndarray:
    """Gradients of u at the boundary facet quadrature points: (nb, q, 2)."""
    tab = edge_tables(space, quad_degree)
    dofs = space.cell_dofs[space.mesh.boundary_cells]
    return np.einsum("bi,bqid->bqd", u[dofs], tab["grad"])


def locate_points(space: FESpace, points: np.ndarray, tol: float = 1e-10):
    """Find containing cells and reference coordinates of physical points.

    Returns (cells (p,) int, ref (p, 2)).  Raises ValueError when a
    point lies outside the mesh beyond the tolerance.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    _, Jinv, _ = _cell_geometry(space)
    v0 = space.mesh.vertices[space.mesh.cells[:, 0]]
    # reference coords of every point w.r.t. every cell: (p, nc, 2)
    ref = np.einsum("cde,pce->pcd", Jinv, points[:, None, :] - v0[None, :, :])
    violation = np.maximum(
        np.maximum(-ref[..., 0], -ref[..., 1]), ref.sum(axis=2) - 1.0
    )
    best = violation.argmin(axis=1)
    worst = violation[np.arange(len(points)), best]
    if np.any(worst > tol):
        bad = points[worst > tol][0]
        raise ValueError(f"point {bad} lies outside the mesh")
    return best, ref[np.arange(len(points)), best]


def eval_function(space: FESpace, u: np.ndarray, points: np.ndarray,
                  gradient: bool = False, tol: float = 1e-10):
    """Evaluate u (or its broken gradient) at arbitrary physical points.

    Points up to `tol` outside the mesh evaluate by extension of the
    nearest cell's polynomial (useful on curved-boundary slivers).
    """
    cells, ref = locate_points(space, points, tol=tol)
    basis = _reference_basis(space.degree)
    values, ref_grads = basis.eval(ref)
    dofs = space.cell_dofs[cells]
    if not gradient:
        # values has one row per point because each point has its own ref
        return np.einsum("pi,pi->p", values, u[dofs])
    _, Jinv, _ = _cell_geometry(space)
    grads = np.einsum("pid,pde->pie", ref_grads, Jinv[cells])
    return np.einsum("pid,pi->pd", grads, u[dofs])

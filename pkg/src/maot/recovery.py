"""Gradient recovery and finite element Hessians.

The recovered gradient of a potential u in V is the componentwise L2
projection of its broken gradient back onto V.  The FE Hessian tests
second derivatives against V without integrating the PDE by parts: the
volume term moves one derivative onto the test function and a boundary
flux restores consistency, so quadratic potentials reproduce their exact
(constant) Hessians on any mesh.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import assembly
from .fe_space import FESpace

__all__ = [
    "RecoveredField",
    "recover_gradient",
    "fe_hessian",
    "fe_hessian_recovered",
    "convexity_check",
]


@dataclass(frozen=True)
class RecoveredField:
    """Componentwise coefficient storage for vector/matrix FE fields.

    Gradients hold components (g1, g2); symmetric Hessians hold the
    upper triangle (h11, h12, h22).
    """

    space: FESpace
    components: np.ndarray  # (n_components, N)

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    def as_matrices(self, at: np.ndarray) -> np.ndarray:
        """Expand Hessian components sampled at dofs `at` to (..., 2, 2)."""
        if self.n_components != 3:
            raise ValueError("as_matrices applies to symmetric 3-component fields")
        h11, h12, h22 = (self.components[k][at] for k in range(3))
        out = np.empty(h11.shape + (2, 2))
        out[..., 0, 0] = h11
        out[..., 0, 1] = h12
        out[..., 1, 0] = h12
        out[..., 1, 1] = h22
        return out


def _ops(space: FESpace, ops):
    return assembly.cached_operators(space) if ops is None else ops


def recover_gradient(space: FESpace, u: np.ndarray, ops=None) -> RecoveredField:
    """L2 projection of the broken gradient of u onto V, per component."""
    ops = _ops(space, ops)
    comps = np.stack([ops.project(ops.A[a] @ u) for a in (0, 1)])
    return RecoveredField(space=space, components=comps)


def hessian_operators(space: FESpace):
    """Matrices (T11, T12, T22) taking the potential u to the moment
    vector of its plain FE Hessian, so that M h_ab = T_ab u.

    T_ab = Bd_ab - L_ab with the mixed stiffness L_ab = int d_a Phi_i
    d_b Phi_j and the boundary flux Bd_ab = boundary int of n_a Phi_i
    d_b Phi_j; the off-diagonal block is symmetrized.
    """
    key = "plain_hessian_ops"
    if key not in space._cache:
        def T(a, b):
            L = assembly.grad_grad_matrix(space, a, b)
            Bd = assembly.boundary_normal_derivative_matrix(space, a, b)
            return (Bd - L).tocsr()

        T11 = T(0, 0)
        T22 = T(1, 1)
        T12 = 0.5 * (T(0, 1) + T(1, 0))
        space._cache[key] = (T11, T12, T22)
    return space._cache[key]


def fe_hessian(space: FESpace, u: np.ndarray, ops=None) -> RecoveredField:
    """FE Hessian of u from the broken gradient, symmetrized.

    Component (a, b) solves M h_ab = T_ab u, see `hessian_operators`.
    """
    ops = _ops(space, ops)
    T11, T12, T22 = hessian_operators(space)
    comps = np.stack([ops.project(T @ u) for T in (T11, T12, T22)])
    return RecoveredField(space=space, components=comps)


def fe_hessian_recovered(space: FESpace, g: RecoveredField,
                         ops=None) -> RecoveredField:
    """FE Hessian built from a recovered gradient g, symmetrized.

    Component (a, b) solves M h_ab = R_a g_b with R_a = N_a - A_a^T; for
    gradients already in V this is the L2 projection of d_a g_b.
    """
    ops = _ops(space, ops)
    g1, g2 = g.components
    h11 = ops.project(ops.R[0] @ g1)
    h22 = ops.project(ops.R[1] @ g2)
    h12 = 0.5 * (ops.project(ops.R[0] @ g2) + ops.project(ops.R[1] @ g1))
    return RecoveredField(space=space, components=np.stack([h11, h12, h22]))


def convexity_check(space: FESpace, H: RecoveredField) -> bool:
    """True when the nodal Hessian is positive definite at every dof.

    Uses the leading-minor test h11 > 0 and h11 h22 - h12^2 > 0.
    """
    h11, h12, h22 = H.components
    return bool(np.all(h11 > 0.0) and np.all(h11 * h22 - h12 * h12 > 0.0))

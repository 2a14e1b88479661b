"""Conforming triangulations of the square and the unit disk.

Meshes are stored as flat numpy arrays (vertex coordinates, cell
connectivity, boundary facets with outward unit normals).  The disk is
meshed by uniform red refinement of a hexagon fan with new boundary
vertices projected radially onto the circle, so every refinement level
keeps all boundary vertices on the exact boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Mesh",
    "triangulate_square",
    "triangulate_disk",
    "refine",
    "meshsize",
    "write_mesh",
    "read_mesh",
]


@dataclass(frozen=True)
class Mesh:
    """Conforming triangulation with boundary information.

    Attributes
    ----------
    vertices : (nv, 2) float array
    cells : (nc, 3) int array
        Vertex triples, counterclockwise.
    boundary_edges : (nb, 2) int array
        Boundary facets (v0, v1), oriented counterclockwise along the
        owning cell so the outward normal is the right-hand rotation.
    boundary_cells : (nb,) int array
        Owning cell of each boundary facet.
    boundary_normals : (nb, 2) float array
        Outward unit normals.
    domain : str
        One of "disk", "square", "generic"; drives boundary projection
        under refinement.
    radius : float
        Disk radius (ignored for other domains).
    """

    vertices: np.ndarray
    cells: np.ndarray
    boundary_edges: np.ndarray
    boundary_cells: np.ndarray
    boundary_normals: np.ndarray
    domain: str = "generic"
    radius: float = 1.0
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]

    def cell_areas(self) -> np.ndarray:
        v = self.vertices
        c = self.cells
        d1 = v[c[:, 1]] - v[c[:, 0]]
        d2 = v[c[:, 2]] - v[c[:, 0]]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def area(self) -> float:
        return float(self.cell_areas().sum())


def _signed_area(v: np.ndarray, cells: np.ndarray) -> np.ndarray:
    d1 = v[cells[:, 1]] - v[cells[:, 0]]
    d2 = v[cells[:, 2]] - v[cells[:, 0]]
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def _orient(vertices: np.ndarray, cells: np.ndarray) -> np.ndarray:
    """Flip cells with negative signed area to counterclockwise order."""
    cells = cells.copy()
    flip = _signed_area(vertices, cells) < 0.0
    cells[flip] = cells[flip][:, [0, 2, 1]]
    return cells


def _boundary_facets(vertices, cells):
    """Extract boundary facets with owning cells and outward normals.

    A facet is on the boundary when it belongs to exactly one cell.  The
    returned edges keep the counterclockwise orientation of the owning
    cell, so the outward normal of (a, b) is rot(-90) applied to b - a.
    """
    edges = np.concatenate(
        [cells[:, [0, 1]], cells[:, [1, 2]], cells[:, [2, 0]]], axis=0
    )
    owner = np.concatenate([np.arange(len(cells))] * 3)
    key = np.sort(edges, axis=1)
    _, inverse, counts = np.unique(
        key, axis=0, return_inverse=True, return_counts=True
    )
    on_boundary = counts[inverse] == 1
    bedges = edges[on_boundary]
    bcells = owner[on_boundary]
    tang = vertices[bedges[:, 1]] - vertices[bedges[:, 0]]
    normals = np.stack([tang[:, 1], -tang[:, 0]], axis=1)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return bedges, bcells, normals


def _make_mesh(vertices, cells, domain, radius=1.0) -> Mesh:
    cells = _orient(vertices, cells)
    if np.any(_signed_area(vertices, cells) <= 0.0):
        raise ValueError("degenerate cell with nonpositive area")
    bedges, bcells, normals = _boundary_facets(vertices, cells)
    return Mesh(
        vertices=vertices,
        cells=cells,
        boundary_edges=bedges,
        boundary_cells=bcells,
        boundary_normals=normals,
        domain=domain,
        radius=radius,
    )


def triangulate_square(n: int, side: float = 1.0) -> Mesh:
    """Uniform triangulation of the square (-side/2, side/2)^2.

    Each of the n x n subsquares is split along its lower-left to
    upper-right diagonal, giving 2 n^2 cells and (n + 1)^2 vertices.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    t = np.linspace(-0.5 * side, 0.5 * side, n + 1)
    xx, yy = np.meshgrid(t, t, indexing="xy")
    vertices = np.stack([xx.ravel(), yy.ravel()], axis=1)

    def vid(i, j):
        return j * (n + 1) + i

    cells = []
    for j in range(n):
        for i in range(n):
            v00, v10 = vid(i, j), vid(i + 1, j)
            v01, v11 = vid(i, j + 1), vid(i + 1, j + 1)
            cells.append((v00, v10, v11))
            cells.append((v00, v11, v01))
    return _make_mesh(vertices, np.asarray(cells, dtype=np.int64), "square")


def triangulate_disk(level: int, radius: float = 1.0) -> Mesh:
    """Concentric-ring triangulation of the disk with 2**level rings.

    Ring j carries 6*j vertices on the circle of radius j/n (n rings in
    total), so level 0 is a fan of 6 equilateral cells around the origin
    (7 vertices) and each level doubles the ring count.  Vertex and cell
    counts match uniform red refinement of the level-0 fan, but every
    ring is an exact circle, which keeps the cells near the boundary
    uniformly shaped.  (Red-refining the fan instead leaves the interior
    rings hexagonal; the resulting sliver band next to the boundary can
    pollute recovered second derivatives on coarse meshes.)
    """
    if level < 0:
        raise ValueError("level must be >= 0")
    n = 2**level
    verts = [np.zeros((1, 2))]
    for j in range(1, n + 1):
        theta = 2.0 * np.pi * np.arange(6 * j) / (6 * j)
        r = radius * j / n
        verts.append(r * np.stack([np.cos(theta), np.sin(theta)], axis=1))
    vertices = np.vstack(verts)
    start = np.concatenate([[0], np.cumsum([1] + [6 * j for j in range(1, n)])])

    def ring_vertex(j: int, k: int) -> int:
        if j == 0:
            return 0
        return start[j] + k % (6 * j)

    cells = []
    for j in range(1, n + 1):
        for s in range(6):
            # Chains bounding sector s of the annular band (j-1, j):
            # j vertices on the inner ring, j+1 on the outer one.
            inner = [ring_vertex(j - 1, (j - 1) * s + t) for t in range(j)]
            outer = [ring_vertex(j, j * s + t) for t in range(j + 1)]
            for t in range(j):
                cells.append((outer[t], outer[t + 1], inner[t]))
            for t in range(j - 1):
                cells.append((outer[t + 1], inner[t + 1], inner[t]))
    return _make_mesh(vertices, np.asarray(cells, dtype=np.int64), "disk", radius)


def refine(mesh: Mesh) -> Mesh:
    """Uniform red refinement: each cell is split into 4 via edge midpoints.

    For disk meshes, midpoints of boundary edges are projected radially
    onto the circle so the boundary vertex set stays on the exact
    boundary at every level.
    """
    v = mesh.vertices
    cells = mesh.cells
    edges = np.concatenate(
        [cells[:, [0, 1]], cells[:, [1, 2]], cells[:, [2, 0]]], axis=0
    )
    key = np.sort(edges, axis=1)
    uniq, inverse = np.unique(key, axis=0, return_inverse=True)
    mid = 0.5 * (v[uniq[:, 0]] + v[uniq[:, 1]])

    if mesh.domain == "disk":
        bset = set(map(tuple, np.sort(mesh.boundary_edges, axis=1).tolist()))
        for e, (a, b) in enumerate(uniq.tolist()):
            if (a, b) in bset:
                r = np.linalg.norm(mid[e])
                mid[e] *= mesh.radius / r

    new_vertices = np.vstack([v, mid])
    nv = len(v)
    m01 = nv + inverse[: len(cells)]
    m12 = nv + inverse[len(cells) : 2 * len(cells)]
    m20 = nv + inverse[2 * len(cells) :]
    c0, c1, c2 = cells[:, 0], cells[:, 1], cells[:, 2]
    new_cells = np.concatenate(
        [
            np.stack([c0, m01, m20], axis=1),
            np.stack([c1, m12, m01], axis=1),
            np.stack([c2, m20, m12], axis=1),
            np.stack([m01, m12, m20], axis=1),
        ],
        axis=0,
    )
    return _make_mesh(new_vertices, new_cells, mesh.domain, mesh.radius)


def meshsize(mesh: Mesh) -> float:
    """Maximal cell diameter (longest edge over all cells)."""
    v = mesh.vertices
    c = mesh.cells
    h = 0.0
    for i, j in ((0, 1), (1, 2), (2, 0)):
        h = max(h, float(np.linalg.norm(v[c[:, i]] - v[c[:, j]], axis=1).max()))
    return h


def write_mesh(mesh: Mesh, path: str) -> None:
    """Plain text dump: vertices, cells, boundary facets with normals."""
    with open(path, "w") as f:
        f.write(f"vertices {mesh.n_vertices}\n")
        for x, y in mesh.vertices:
            f.write(f"{float(x)!r} {float(y)!r}\n")
        f.write(f"cells {mesh.n_cells}\n")
        for i, j, k in mesh.cells:
            f.write(f"{i} {j} {k}\n")
        f.write(f"boundary {len(mesh.boundary_edges)}\n")
        for (i, j), (nx, ny) in zip(mesh.boundary_edges, mesh.boundary_normals):
            f.write(f"{i} {j} {float(nx)!r} {float(ny)!r}\n")


def read_mesh(path: str) -> Mesh:
    """Read the plain text format written by `write_mesh`.

    Boundary facets and normals are recomputed from the connectivity;
    the boundary section of the file is cross-checked against them.
    """
    with open(path) as f:
        tokens = f.read().split()
    pos = 0

    def expect(word):
        nonlocal pos
        if tokens[pos] != word:
            raise ValueError(f"expected '{word}' at token {pos}")
        pos += 1
        count = int(tokens[pos])
        pos += 1
        return count

    nv = expect("vertices")
    vertices = np.array(tokens[pos : pos + 2 * nv], dtype=float).reshape(nv, 2)
    pos += 2 * nv
    nc = expect("cells")
    cells = np.array(tokens[pos : pos + 3 * nc], dtype=np.int64).reshape(nc, 3)
    pos += 3 * nc
    nb = expect("boundary")
    pos += 4 * nb

    mesh = _make_mesh(vertices, cells, "generic")
    if len(mesh.boundary_edges) != nb:
        raise ValueError(
            f"boundary section lists {nb} facets, connectivity has "
            f"{len(mesh.boundary_edges)}"
        )
    return mesh

"""Image-driven grid deformation via optimal transport.

A grayscale bitmap becomes a piecewise-constant density on the unit
square, transported to the flat density of the same total mass on the
same square.  The gradient of the computed potential is the transport
map; pushing a uniform overlay grid through it visualises the map as a
deformed grid, with cells crowding into the bright (heavy) regions of
the image and thinning over the dark ones.  Output is a standalone SVG.

Pixel conventions: the raster maps onto (-1/2, 1/2)^2 with row 0 at the
top (decreasing y), matching how image files are stored.  Binary mode
thresholds at mid-gray and assigns density 2 to white, 1 to black;
grayscale maps sample values linearly onto [1, 2].  Keeping the density
ratio at 2:1 keeps the Monge-Ampere problem comfortably away from
degenerate (vanishing-density) territory while still deforming visibly.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fe_space import FESpace, build_space, eval_function, interpolate
from .mesh import triangulate_square
from .nonlinear import (
    NewtonState,
    ProblemData,
    SolveOptions,
    make_square_target,
    solve_maot,
)

__all__ = [
    "PixelDensity",
    "load_bitmap",
    "build_image_problem",
    "solve_image",
    "deformed_grid",
    "deformed_cell_areas",
    "render_svg",
    "parse_svg_paths",
]


# ---------------------------------------------------------------------------
# pixel densities

@dataclass(frozen=True)
class PixelDensity:
    """Piecewise-constant density on the unit square read off a pixel grid.

    values has shape (height, width) with row 0 the top pixel row, so
    increasing row index walks downward in y.  All values live in [1, 2]
    (2 on white, 1 on black for thresholded images).  The exact total
    mass over the square is values.mean(), since every pixel covers area
    1 / (width * height).
    """

    width: int
    height: int
    values: np.ndarray

    def lookup(self, x: np.ndarray) -> np.ndarray:
        """Density of the pixel containing each point of the square."""
        x = np.asarray(x, dtype=float)
        col = np.floor((x[..., 0] + 0.5) * self.width).astype(int)
        row_up = np.floor((x[..., 1] + 0.5) * self.height).astype(int)
        col = np.clip(col, 0, self.width - 1)
        row_up = np.clip(row_up, 0, self.height - 1)
        return self.values[self.height - 1 - row_up, col]

    def mean(self) -> float:
        return float(self.values.mean())


_WS = frozenset(b" \t\r\n\x0b\x0c")


def _next_token(buf: bytes, i: int):
    """Next whitespace-delimited header token, skipping # comments."""
    n = len(buf)
    while i < n:
        c = buf[i]
        if c in _WS:
            i += 1
        elif c == 0x23:  # '#' comment runs to end of line
            j = buf.find(b"\n", i)
            i = n if j < 0 else j + 1
        else:
            j = i
            while j < n and buf[j] not in _WS and buf[j] != 0x23:
                j += 1
            return buf[i:j], j
    return None, n


def load_bitmap(path, mode: str = "binary") -> PixelDensity:
    """Read a PGM image (ASCII P2 or binary P5) as a PixelDensity.

    mode "binary" thresholds at mid-gray (white -> 2, black -> 1);
    "gray" maps [0, maxval] linearly onto [1, 2].  Header comments are
    honoured; malformed headers, non-positive dimensions, and truncated
    rasters raise ValueError.
    """
    if mode not in ("binary", "gray"):
        raise ValueError(f"mode must be 'binary' or 'gray', got {mode!r}")
    buf = Path(path).read_bytes()
    magic, i = _next_token(buf, 0)
    if magic not in (b"P2", b"P5"):
        raise ValueError(f"not a PGM bitmap (magic {magic!r})")
    fields = []
    for name in ("width", "height", "maxval"):
        tok, i = _next_token(buf, i)
        if tok is None or not tok.isdigit():
            raise ValueError(f"malformed PGM header: bad {name} field")
        fields.append(int(tok))
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise ValueError(f"PGM dimensions must be positive, got {width}x{height}")
    if not 0 < maxval < 65536:
        raise ValueError(f"PGM maxval out of range: {maxval}")

    if magic == b"P5":
        # a single whitespace byte separates the header from the raster
        if i >= len(buf) or buf[i] not in _WS:
            raise ValueError("malformed PGM header: no raster separator")
        i += 1
        nbytes = 1 if maxval < 256 else 2
        need = width * height * nbytes
        raw = buf[i:i + need]
        if len(raw) < need:
            raise ValueError("truncated PGM raster")
        dt = np.uint8 if nbytes == 1 else np.dtype(">u2")
        pix = np.frombuffer(raw, dtype=dt).astype(float)
    else:
        vals = []
        total = width * height
        while len(vals) < total:
            tok, i = _next_token(buf, i)
            if tok is None:
                raise ValueError("truncated PGM raster")
            if not tok.isdigit():
                raise ValueError(f"bad PGM sample {tok!r}")
            vals.append(int(tok))
        pix = np.asarray(vals, dtype=float)
    pix = pix.reshape(height, width)
    if pix.max() > maxval:
        raise ValueError("PGM sample exceeds declared maxval")

    if mode == "binary":
        values = np.where(pix > 0.5 * maxval, 2.0, 1.0)
    else:
        values = 1.0 + pix / maxval
    return PixelDensity(width=width, height=height, values=values)


# ---------------------------------------------------------------------------
# transport problem

def build_image_problem(density: PixelDensity) -> ProblemData:
    """Transport the pixel density to the flat density on the same square.

    The target density is the constant mean of the pixel values, so mass
    balances exactly; rho_total is pinned to that mean as well, keeping
    the compatibility check independent of whether the mesh resolves
    pixel boundaries.  Bright cells (rho = 2) must spread, dark ones
    (rho = 1) contract, by the ratio rho / sigma.
    """
    sig = density.mean()
    return ProblemData(
        rho=density.lookup,
        sigma=lambda p: sig + 0.0 * np.asarray(p, dtype=float)[..., 0],
        grad_sigma=lambda p: np.zeros_like(np.asarray(p, dtype=float)),
        target=make_square_target(1.0),
        rho_total=sig,
        name="image",
    )


def solve_image(density: PixelDensity, degree: int = 1,
                recovery: str = "recovered", mesh_n: int | None = None,
                tol: float = 1e-8, itermax: int = 50,
                verbose: bool = False):
    """End-to-end transport solve for a pixel density.

    The mesh is a uniform triangulated square whose grid lines coincide
    with pixel boundaries whenever the image is small enough (mesh_n a
    multiple of the pixel count per side), so quadrature never straddles
    a density jump.  Very fine images get a capped mesh and the density
    is then sampled mid-cell like any rough coefficient.

    The Newton start is a slightly contracted identity, 0.9 * |x|^2 / 2:
    source and target are the same square here, so the plain identity
    start puts every boundary image exactly on the kinked target
    boundary and the iteration can rattle between faces.  Shrinking the
    start keeps early boundary images strictly inside, and they approach
    the faces from within as the residual falls.

    Returns (space, state).
    """
    if mesh_n is None:
        w = max(density.width, density.height)
        if w <= 96:
            mesh_n = w * max(1, -(-8 // w))  # pixel-aligned, >= 8 cells across
        else:
            mesh_n = 96
    mesh = triangulate_square(mesh_n)
    space = build_space(mesh, degree)
    problem = build_image_problem(density)
    u0 = interpolate(space, lambda x: 0.45 * (x[:, 0] ** 2 + x[:, 1] ** 2))
    options = SolveOptions(tol=tol, itermax=itermax, recovery=recovery,
                           verbose=verbose)
    state = solve_maot(space, problem, options, u0=u0)
    return space, state


# ---------------------------------------------------------------------------
# grid deformation

def deformed_grid(space: FESpace, state: NewtonState, grid=(9, 9),
                  samples: int = 129, use_recovered: bool = True):
    """Push a uniform overlay grid through the computed transport map.

    Returns grid[0] horizontal followed by grid[1] vertical polylines,
    each a (samples, 2) array: gradient-map images of evenly spaced
    points on lines spanning the source square.  With use_recovered the
    continuous recovered gradient is sampled, giving visually smooth
    polylines; the broken gradient of a degree-1 potential is cellwise
    constant and only useful as a diagnostic.  Sample points outside the
    mesh raise (via point location).
    """
    m, n = grid
    if m < 2 or n < 2 or samples < 2:
        raise ValueError("grid wants at least 2 lines each way, 2 samples per line")
    if use_recovered and getattr(state, "g", None) is None:
        raise ValueError("state carries no recovered gradient; "
                         "solve with recovery='recovered' or pass use_recovered=False")
    verts = space.mesh.vertices
    x0, y0 = verts.min(axis=0)
    x1, y1 = verts.max(axis=0)
    t = np.linspace(0.0, 1.0, samples)
    lines = [np.stack([x0 + (x1 - x0) * t, np.full(samples, yv)], axis=1)
             for yv in np.linspace(y0, y1, m)]
    lines += [np.stack([np.full(samples, xv), y0 + (y1 - y0) * t], axis=1)
              for xv in np.linspace(x0, x1, n)]
    pts = np.vstack(lines)
    if use_recovered:
        g1, g2 = state.g.components
        mapped = np.stack([eval_function(space, g1, pts),
                           eval_function(space, g2, pts)], axis=1)
    else:
        mapped = eval_function(space, state.u, pts, gradient=True)
    return [mapped[i * samples:(i + 1) * samples] for i in range(m + n)]


def deformed_cell_areas(space: FESpace, state: NewtonState) -> np.ndarray:
    """Area of each mesh cell's image under the recovered gradient map.

    Cell corners map through the continuous recovered gradient and the
    shoelace formula measures the image triangle.  Local expansion
    approaches rho / sigma times the cell area as the fields converge,
    so bright-pixel cells come out larger than dark-pixel ones.
    """
    if getattr(state, "g", None) is None:
        raise ValueError("needs a state with a recovered gradient")
    mesh = space.mesh
    g1, g2 = state.g.components
    img = np.stack([eval_function(space, g1, mesh.vertices),
                    eval_function(space, g2, mesh.vertices)], axis=1)
    tri = img[mesh.cells]
    d1 = tri[:, 1] - tri[:, 0]
    d2 = tri[:, 2] - tri[:, 0]
    return 0.5 * np.abs(d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


# ---------------------------------------------------------------------------
# SVG output

def render_svg(polylines, path, box=None, margin: float = 0.05) -> None:
    """Write polylines as a standalone SVG 1.1 drawing.

    box = (x0, x1, y0, y1) is the frame to fit, default the unit target
    square; margin is relative padding.  The y axis is flipped once at
    the group level, so the numbers inside the path data are the raw
    mathematical coordinates (they parse back exactly).  Stroke width is
    0.5% of the viewport.
    """
    polys = [np.asarray(p, dtype=float) for p in polylines]
    if not polys:
        raise ValueError("render_svg wants at least one polyline")
    for p in polys:
        if p.ndim != 2 or p.shape[1] != 2 or len(p) < 2:
            raise ValueError("each polyline must be an (n >= 2, 2) array")
    if box is None:
        box = (-0.5, 0.5, -0.5, 0.5)
    x0, x1, y0, y1 = box
    pad = margin * max(x1 - x0, y1 - y0)
    vx, vy = x0 - pad, y0 - pad
    vw, vh = (x1 - x0) + 2 * pad, (y1 - y0) + 2 * pad
    stroke = 0.005 * max(vw, vh)
    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>\n',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'width="512" height="{512 * vh / vw:.6g}" '
        f'viewBox="{vx:.9g} {-(vy + vh):.9g} {vw:.9g} {vh:.9g}">\n',
        f'<g transform="scale(1,-1)" fill="none" stroke="#000" '
        f'stroke-width="{stroke:.9g}" stroke-linejoin="round" '
        f'stroke-linecap="round">\n',
    ]
    for p in polys:
        coords = " L ".join(f"{x:.9g} {y:.9g}" for x, y in p)
        parts.append(f'<path d="M {coords}"/>\n')
    parts.append("</g>\n</svg>\n")
    Path(path).write_text("".join(parts), encoding="utf-8")


_PATH_RE = re.compile(r'<path d="M ([^"]+)"')


def parse_svg_paths(path):
    """Read back the polyline coordinates from an SVG written by render_svg."""
    text = Path(path).read_text(encoding="utf-8")
    out = []
    for mt in _PATH_RE.finditer(text):
        nums = [float(v) for v in mt.group(1).replace("L", " ").split()]
        out.append(np.asarray(nums).reshape(-1, 2))
    if not out:
        raise ValueError("no path elements found")
    return out

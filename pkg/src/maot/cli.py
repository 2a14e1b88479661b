"""Command line front end.

Subcommands map onto the library layers:

  maot mesh    --domain {disk,square} --level L [--n N] --out mesh.txt
  maot oblique --case oblique-linear --degree K --levels L
               --recovery {on,off} --out eoc.csv
  maot solve   --case {disk-disk,disk-ellipse,custom} [--config problem.json]
               --degree K --level L --recovery {plain,recovered}
               --tol T --itermax I --damping {on,off} --out state.txt
  maot bench   --case NAME --degree K --recovery {on,off} --levels L
               --out table.csv
  maot image   --input img.pgm --mode {binary,gray} --grid MxN --degree K
               --recovery {plain,recovered} --out grid.svg

problem.json for custom solves carries densities as constants or 2D
polynomial coefficient tables (coeffs[i][j] multiplies x^i y^j, so the
gradient of sigma stays analytic), a target shape, and optionally the
domain:

    {"domain": {"shape": "disk", "level": 3},
     "rho": 6.0,
     "sigma": {"poly": [[1.0, 0.0], [0.0, 0.5]]},
     "target": {"shape": "ellipse", "a": 2.0, "b": 3.0}}

state.txt is a headered text dump (status/iterations/residual/multiplier
header lines, then `u N`, `gradient N`, `hessian N` sections with one
node per line); read_state inverts write_state exactly.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from numpy.polynomial import polynomial as npoly

from . import bench
from .fe_space import build_space
from .image_transport import (
    deformed_grid,
    load_bitmap,
    render_svg,
    solve_image,
)
from .mesh import meshsize, triangulate_disk, triangulate_square, write_mesh
from .nonlinear import (
    ProblemData,
    SolveOptions,
    make_circle_target,
    make_ellipse_target,
    make_square_target,
    solve_maot,
)

__all__ = ["main", "write_state", "read_state", "problem_from_config"]


# ---------------------------------------------------------------------------
# problem.json

def _density_from_entry(entry, what: str):
    """Constant or 2D-polynomial density callable from a config entry.

    Returns (callable, coeffs) with coeffs None for constants.
    """
    if isinstance(entry, (int, float)):
        c = float(entry)
        return (lambda x: c + 0.0 * np.asarray(x, dtype=float)[..., 0]), None
    if isinstance(entry, dict) and "poly" in entry:
        coeffs = np.asarray(entry["poly"], dtype=float)
        if coeffs.ndim != 2:
            raise ValueError(f"{what}.poly must be a 2D coefficient table")

        def f(x):
            x = np.asarray(x, dtype=float)
            return npoly.polyval2d(x[..., 0], x[..., 1], coeffs)

        return f, coeffs
    raise ValueError(f"{what} must be a number or {{'poly': table}}")


def _target_from_config(entry):
    shape = entry.get("shape")
    if shape == "circle":
        return make_circle_target(float(entry.get("radius", 1.0)))
    if shape == "ellipse":
        return make_ellipse_target(float(entry["a"]), float(entry["b"]))
    if shape == "square":
        return make_square_target(float(entry.get("side", 1.0)))
    raise ValueError(f"unknown target shape {shape!r}")


def problem_from_config(config: dict) -> ProblemData:
    """Build ProblemData from a parsed problem.json dictionary."""
    rho, _ = _density_from_entry(config["rho"], "rho")
    sigma, sig_coeffs = _density_from_entry(config["sigma"], "sigma")
    if sig_coeffs is None:

        def grad_sigma(p):
            return np.zeros_like(np.asarray(p, dtype=float))

    else:
        dx = npoly.polyder(sig_coeffs, axis=0)
        dy = npoly.polyder(sig_coeffs, axis=1)

        def grad_sigma(p):
            p = np.asarray(p, dtype=float)
            return np.stack(
                [npoly.polyval2d(p[..., 0], p[..., 1], dx),
                 npoly.polyval2d(p[..., 0], p[..., 1], dy)], axis=-1)

    return ProblemData(
        rho=rho, sigma=sigma, grad_sigma=grad_sigma,
        target=_target_from_config(config["target"]),
        rho_total=config.get("rho_total"),
        name=config.get("name", "custom"),
    )


def _mesh_from_config(config: dict, level_override=None):
    dom = config.get("domain", {"shape": "disk", "level": 3})
    shape = dom.get("shape", "disk")
    if shape == "disk":
        level = level_override if level_override is not None \
            else int(dom.get("level", 3))
        return triangulate_disk(level, float(dom.get("radius", 1.0)))
    if shape == "square":
        n = level_override if level_override is not None \
            else int(dom.get("n", 16))
        return triangulate_square(n, float(dom.get("side", 1.0)))
    raise ValueError(f"unknown domain shape {shape!r}")


# ---------------------------------------------------------------------------
# state files

def write_state(path, space, state, recovery: str) -> None:
    """Dump a solver state as headered text (see module docstring)."""
    lines = [
        f"status {state.status}",
        f"iterations {state.iterations}",
        f"residual {state.residual!r}",
        f"multiplier {state.c!r}",
        f"degree {space.degree}",
        f"recovery {recovery}",
        f"u {len(state.u)}",
    ]
    lines += [repr(float(v)) for v in state.u]
    if state.g is not None:
        g1, g2 = state.g.components
        lines.append(f"gradient {len(g1)}")
        lines += [f"{float(a)!r} {float(b)!r}" for a, b in zip(g1, g2)]
    else:
        lines.append("gradient 0")
    h11, h12, h22 = state.H.components
    lines.append(f"hessian {len(h11)}")
    lines += [f"{float(a)!r} {float(b)!r} {float(c)!r}"
              for a, b, c in zip(h11, h12, h22)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_state(path) -> dict:
    """Parse a write_state file back into plain arrays and scalars."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    out, i = {}, 0
    for key, conv in (("status", str), ("iterations", int),
                      ("residual", float), ("multiplier", float),
                      ("degree", int), ("recovery", str)):
        name, _, value = lines[i].partition(" ")
        if name != key:
            raise ValueError(f"expected {key!r} line, got {lines[i]!r}")
        out[key] = conv(value)
        i += 1
    for key in ("u", "gradient", "hessian"):
        name, _, count = lines[i].partition(" ")
        if name != key:
            raise ValueError(f"expected {key!r} section, got {lines[i]!r}")
        n = int(count)
        i += 1
        rows = [[float(v) for v in lines[i + r].split()] for r in range(n)]
        out[key] = (np.asarray(rows, dtype=float).reshape(n, -1)
                    if n else np.empty((0, 0)))
        i += n
    return out


# ---------------------------------------------------------------------------
# table printing

def _print_table(table: bench.EOCTable) -> None:
    eoc_l2 = table.eoc_column("l2")
    eoc_h1 = table.eoc_column("h1")
    print(f"{'level':>5} {'h':>9} {'N':>7} {'l2':>10} {'eoc':>5} "
          f"{'h1':>10} {'eoc':>5}  {'iters':>5} status")
    for row, e2, e1 in zip(table.rows, eoc_l2, eoc_h1):
        f2 = "    -" if e2 is None else f"{e2:5.2f}"
        f1 = "    -" if e1 is None else f"{e1:5.2f}"
        print(f"{row['level']:5d} {row['h']:9.4f} {row['N']:7d} "
              f"{row['l2']:10.3e} {f2} {row['h1']:10.3e} {f1}  "
              f"{row['iters']:5d} {row['status']}")
    const, rate = table.fit("l2")
    if np.isfinite(rate):
        print(f"least-squares L2 fit: error ~= {const:.3g} * h^{rate:.2f}")


def _parse_levels(text: str):
    """'4' runs levels 1..4; '2,3,5' runs exactly those."""
    if "," in text:
        return tuple(int(v) for v in text.split(","))
    return int(text)


def _parse_grid(text: str):
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"grid must look like 9x9, got {text!r}")
    return int(parts[0]), int(parts[1])


_ONOFF = {"on": True, "off": False, "recovered": True, "plain": False}


# ---------------------------------------------------------------------------
# subcommands

def _cmd_mesh(args) -> int:
    if args.domain == "disk":
        mesh = triangulate_disk(args.level, args.radius)
    else:
        mesh = triangulate_square(args.n, args.side)
    write_mesh(mesh, args.out)
    print(f"{args.domain}: {len(mesh.vertices)} vertices, "
          f"{len(mesh.cells)} cells, h = {meshsize(mesh):.4f} -> {args.out}")
    return 0


def _cmd_oblique(args) -> int:
    table = bench.run_convergence(
        args.case, degree=args.degree, recovery=_ONOFF[args.recovery],
        levels=_parse_levels(args.levels), out=args.out,
        verbose=args.verbose)
    _print_table(table)
    if args.out:
        print(f"table -> {args.out}")
    return 0


def _cmd_bench(args) -> int:
    table = bench.run_convergence(
        args.case, degree=args.degree, recovery=_ONOFF[args.recovery],
        levels=_parse_levels(args.levels), tol=args.tol,
        itermax=args.itermax, out=args.out, verbose=args.verbose)
    _print_table(table)
    if args.out:
        print(f"table -> {args.out}")
    return 0


def _cmd_solve(args) -> int:
    recovery = args.recovery
    if args.case == "custom":
        if not args.config:
            print("error: --case custom needs --config problem.json",
                  file=sys.stderr)
            return 2
        try:
            config = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            print(f"error: cannot read {args.config}: {exc}", file=sys.stderr)
            return 2
        problem = problem_from_config(config)
        mesh = _mesh_from_config(config, args.level)
    else:
        case = bench.CASES[args.case]()
        problem = case.problem
        mesh = case.build_mesh(args.level if args.level is not None else 3)
    space = build_space(mesh, args.degree)
    options = SolveOptions(tol=args.tol, itermax=args.itermax,
                           recovery=recovery, damping=_ONOFF[args.damping],
                           verbose=args.verbose)
    state = solve_maot(space, problem, options)
    print(f"{state.status}: {state.iterations} iterations, "
          f"residual {state.residual:.3e}, multiplier {state.c:.3e}")
    if args.out:
        write_state(args.out, space, state, recovery)
        print(f"state -> {args.out}")
    return 0 if state.converged else 1


def _cmd_image(args) -> int:
    try:
        density = load_bitmap(args.input, mode=args.mode)
    except (OSError, ValueError) as exc:
        print(f"error: cannot read {args.input}: {exc}", file=sys.stderr)
        return 2
    print(f"{args.input}: {density.width}x{density.height} pixels, "
          f"mean density {density.mean():.3f}")
    space, state = solve_image(
        density, degree=args.degree, recovery=args.recovery,
        mesh_n=args.mesh_n, tol=args.tol, itermax=args.itermax,
        verbose=args.verbose)
    print(f"{state.status}: {state.iterations} iterations, "
          f"residual {state.residual:.3e}")
    polys = deformed_grid(space, state, grid=_parse_grid(args.grid),
                          samples=args.samples,
                          use_recovered=(args.recovery == "recovered"))
    render_svg(polys, args.out)
    print(f"grid -> {args.out}")
    return 0 if state.converged else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="maot",
        description="Monge-Ampere optimal transport solver "
                    "(nonvariational FEM with gradient recovery)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mesh", help="triangulate a domain and write it out")
    p.add_argument("--domain", choices=("disk", "square"), default="disk")
    p.add_argument("--level", type=int, default=3,
                   help="disk refinement level (2**level rings)")
    p.add_argument("--n", type=int, default=16, help="square cells per side")
    p.add_argument("--radius", type=float, default=1.0)
    p.add_argument("--side", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_mesh)

    p = sub.add_parser("oblique",
                       help="linear oblique-derivative convergence table")
    p.add_argument("--case", default="oblique-linear",
                   choices=[k for k in bench.CASES if "oblique" in k])
    p.add_argument("--degree", type=int, default=1)
    p.add_argument("--levels", default="4",
                   help="int L for 1..L, or comma list like 2,3,4,5")
    p.add_argument("--recovery", choices=("on", "off"), default="on")
    p.add_argument("--out", default=None, help="CSV output path")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=_cmd_oblique)

    p = sub.add_parser("solve", help="run the Newton transport solver once")
    p.add_argument("--case", choices=("disk-disk", "disk-ellipse", "custom"),
                   default="disk-disk")
    p.add_argument("--config", default=None, help="problem.json for custom")
    p.add_argument("--degree", type=int, default=1)
    p.add_argument("--level", type=int, default=None)
    p.add_argument("--recovery", choices=("plain", "recovered"),
                   default="recovered")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--itermax", type=int, default=30)
    p.add_argument("--damping", choices=("on", "off"), default="on")
    p.add_argument("--out", default=None, help="state.txt output path")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=_cmd_solve)

    p = sub.add_parser("bench", help="nonlinear benchmark convergence table")
    p.add_argument("--case", choices=sorted(bench.CASES), default="disk-disk")
    p.add_argument("--degree", type=int, default=1)
    p.add_argument("--recovery", choices=("on", "off", "recovered", "plain"),
                   default="on")
    p.add_argument("--levels", default="4")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--itermax", type=int, default=30)
    p.add_argument("--out", default=None, help="CSV output path")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("image", help="image-driven deformed-grid demo")
    p.add_argument("--input", required=True, help="PGM file (P2 or P5)")
    p.add_argument("--mode", choices=("binary", "gray"), default="binary")
    p.add_argument("--grid", default="9x9", help="overlay lines, MxN")
    p.add_argument("--degree", type=int, default=1)
    p.add_argument("--recovery", choices=("plain", "recovered"),
                   default="recovered")
    p.add_argument("--mesh-n", type=int, default=None,
                   help="square mesh cells per side (default: pixel-aligned)")
    p.add_argument("--samples", type=int, default=129,
                   help="sample points per overlay line")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--itermax", type=int, default=50)
    p.add_argument("--out", required=True, help="SVG output path")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=_cmd_image)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

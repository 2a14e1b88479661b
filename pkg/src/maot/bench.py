"""Convergence-study harness: error norms, EOC tables, CSV emission.

Errors are measured over the mesh only; the sliver between the mesh and
the curved domain is ignored.  The potential is defined up to a constant
(the solver pins the mean), so its L2 error subtracts the weighted mean
of the error, which is the best-constant shift.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .assembly import SolverError, cached_operators
from .fe_space import (FESpace, build_space, cell_gradients, cell_tables,
                       cell_values, edge_tables)
from .mesh import Mesh, meshsize, triangulate_disk, triangulate_square
from .nonlinear import (NewtonState, ProblemData, SolveOptions,
                        make_circle_target, make_ellipse_target, solve_maot)
from .oblique import LinearObliqueProblem, ObliquenessError, EllipticityError, solve_oblique
from .recovery import RecoveredField, recover_gradient

__all__ = [
    "error_norms", "eoc", "fit_rate", "EOCTable", "parse_csv",
    "BenchmarkCase", "CASES", "run_convergence",
]


def error_norms(space: FESpace, u: np.ndarray, exact,
                exact_grad=None, exact_hess=None,
                gradient: RecoveredField | None = None,
                hessian: RecoveredField | None = None,
                quad_degree: int | None = None,
                shift_mean: bool = True) -> dict:
    """Quadrature norms of the solution error.

    Returns a dict with keys l2 (potential, best-constant shifted when
    shift_mean), h1 (broken gradient seminorm, needs exact_grad),
    recgrad (recovered gradient vs exact_grad, needs gradient) and hess
    (Frobenius norm vs exact_hess, needs hessian); absent inputs yield
    None entries.
    """
    qd = quad_degree if quad_degree is not None else 2 * space.degree + 2
    tab = cell_tables(space, qd)
    w, x = tab["w"], tab["x"]
    out = {"l2": None, "h1": None, "recgrad": None, "hess": None}

    e = cell_values(space, u, qd) - np.asarray(exact(x), dtype=float)
    if shift_mean:
        e = e - np.sum(w * e) / np.sum(w)
    out["l2"] = math.sqrt(np.sum(w * e * e))

    if exact_grad is not None:
        ge = np.asarray(exact_grad(x), dtype=float)
        eg = cell_gradients(space, u, qd) - ge
        out["h1"] = math.sqrt(np.sum(w * np.einsum("cqd,cqd->cq", eg, eg)))
        if gradient is not None:
            gq = np.stack([cell_values(space, comp, qd)
                           for comp in gradient.components], axis=-1)
            eg = gq - ge
            out["recgrad"] = math.sqrt(
                np.sum(w * np.einsum("cqd,cqd->cq", eg, eg)))

    if exact_hess is not None and hessian is not None:
        he = np.asarray(exact_hess(x), dtype=float)
        h11, h12, h22 = (cell_values(space, comp, qd)
                         for comp in hessian.components)
        frob2 = ((h11 - he[..., 0, 0]) ** 2
                 + 2.0 * (h12 - he[..., 0, 1]) ** 2
                 + (h22 - he[..., 1, 1]) ** 2)
        out["hess"] = math.sqrt(np.sum(w * frob2))
    return out


def eoc(errors, hs) -> list:
    """Experimental orders of convergence between consecutive levels."""
    errors = [float(e) for e in errors]
    hs = [float(h) for h in hs]
    if len(errors) != len(hs) or len(errors) < 2:
        raise ValueError("need matching error/h lists of length >= 2")
    if any(e <= 0 for e in errors) or any(h <= 0 for h in hs):
        raise ValueError("errors and mesh sizes must be positive")
    return [math.log(errors[i] / errors[i - 1]) / math.log(hs[i] / hs[i - 1])
            for i in range(1, len(errors))]


def fit_rate(hs, errors):
    """Least-squares (constant, rate) fit of errors ~ C * h**r."""
    hs = np.asarray(hs, dtype=float)
    errors = np.asarray(errors, dtype=float)
    keep = np.isfinite(errors) & (errors > 0)
    if keep.sum() < 2:
        return math.nan, math.nan
    r, logc = np.polyfit(np.log(hs[keep]), np.log(errors[keep]), 1)
    return math.exp(logc), float(r)


# ---------------------------------------------------------------------------
# EOC table with the CSV schema
# ---------------------------------------------------------------------------

CSV_HEADER = ("level,h,N,l2,eoc_l2,h1,eoc_h1,recgrad,eoc_recgrad,"
              "hess,eoc_hess,iters,status")
_ERR_KEYS = ("l2", "h1", "recgrad", "hess")


@dataclass
class EOCTable:
    """Per-level errors with EOC columns between consecutive rows."""

    case: str
    degree: int
    recovery: bool
    rows: list = field(default_factory=list)

    def add_row(self, level: int, h: float, N: int, errors: dict,
                iters: int, status: str) -> None:
        if self.rows and not h < self.rows[-1]["h"]:
            raise ValueError("mesh size must decrease down the table")
        row = {"level": int(level), "h": float(h), "N": int(N),
               "iters": int(iters), "status": str(status)}
        for k in _ERR_KEYS:
            v = errors.get(k)
            row[k] = math.nan if v is None else float(v)
        self.rows.append(row)

    def column(self, key: str) -> list:
        return [row[key] for row in self.rows]

    def eoc_column(self, key: str) -> list:
        """Rates for one error column; None where undefined (first row,
        or either neighbour missing/invalid)."""
        out = [None]
        for prev, cur in zip(self.rows, self.rows[1:]):
            e0, e1 = prev[key], cur[key]
            if (math.isfinite(e0) and math.isfinite(e1)
                    and e0 > 0 and e1 > 0):
                out.append(math.log(e1 / e0) / math.log(cur["h"] / prev["h"]))
            else:
                out.append(None)
        return out

    def fit(self, key: str):
        """Least-squares (constant, rate) over all rows of one column."""
        return fit_rate(self.column("h"), self.column(key))

    def to_csv(self, path=None) -> str:
        """Write the table (shortest round-trip float formatting).

        path may be a filesystem path or a writable file object; the CSV
        text is returned either way.
        """
        lines = [CSV_HEADER]
        for row, *eocs in zip(self.rows, *(self.eoc_column(k)
                                           for k in _ERR_KEYS)):
            cells = [str(row["level"]), repr(row["h"]), str(row["N"])]
            for k, rate in zip(_ERR_KEYS, eocs):
                cells.append(repr(row[k]))
                cells.append("" if rate is None else repr(rate))
            cells.append(str(row["iters"]))
            cells.append(row["status"])
            lines.append(",".join(cells))
        text = "\n".join(lines) + "\n"
        if path is not None:
            if hasattr(path, "write"):
                path.write(text)
            else:
                with open(path, "w") as f:
                    f.write(text)
        return text


def parse_csv(source) -> list:
    """Read a table emitted by EOCTable.to_csv back into row dicts.

    source is a path, file object, or the CSV text itself.  Empty EOC
    cells come back as None; floats round-trip exactly.
    """
    if hasattr(source, "read"):
        text = source.read()
    else:
        source = os.fspath(source)
        if "\n" in source or "," in source:
            text = source
        else:
            with open(source) as f:
                text = f.read()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError("unrecognized table header")
    names = CSV_HEADER.split(",")
    rows = []
    for ln in lines[1:]:
        cells = ln.split(",")
        if len(cells) != len(names):
            raise ValueError(f"malformed row: {ln!r}")
        row = {}
        for name, cell in zip(names, cells):
            if name in ("level", "N", "iters"):
                row[name] = int(cell)
            elif name == "status":
                row[name] = cell
            else:
                row[name] = None if cell == "" else float(cell)
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# Benchmark case registry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BenchmarkCase:
    """One convergence experiment: mesh family, problem, exact fields."""

    name: str
    kind: str                      # "newton" or "linear"
    build_mesh: object             # level -> Mesh
    exact: object                  # x (..., 2) -> values
    exact_grad: object             # x -> (..., 2)
    exact_hess: object             # x -> (..., 2, 2)
    problem: ProblemData | None = None     # newton cases
    make_linear: object = None             # linear cases: space -> problem


def _const_hess(m00, m01, m11):
    m = np.array([[m00, m01], [m01, m11]], dtype=float)

    def hess(x):
        return np.broadcast_to(m, x.shape[:-1] + (2, 2))
    return hess


def _disk_identity_case() -> BenchmarkCase:
    data = ProblemData(
        rho=lambda x: np.ones(x.shape[:-1]),
        sigma=lambda p: np.ones(p.shape[:-1]),
        grad_sigma=lambda p: np.zeros_like(p),
        target=make_circle_target(1.0),
        name="disk-disk",
    )
    return BenchmarkCase(
        name="disk-disk", kind="newton",
        build_mesh=triangulate_disk,
        exact=lambda x: 0.5 * (x[..., 0] ** 2 + x[..., 1] ** 2),
        exact_grad=lambda x: x.copy(),
        exact_hess=_const_hess(1.0, 0.0, 1.0),
        problem=data,
    )


def _disk_ellipse_case() -> BenchmarkCase:
    data = ProblemData(
        rho=lambda x: 6.0 * np.ones(x.shape[:-1]),
        sigma=lambda p: np.ones(p.shape[:-1]),
        grad_sigma=lambda p: np.zeros_like(p),
        target=make_ellipse_target(2.0, 3.0),
        name="disk-ellipse",
    )
    return BenchmarkCase(
        name="disk-ellipse", kind="newton",
        build_mesh=triangulate_disk,
        exact=lambda x: x[..., 0] ** 2 + 1.5 * x[..., 1] ** 2 - 0.625,
        exact_grad=lambda x: np.stack([2.0 * x[..., 0], 3.0 * x[..., 1]],
                                      axis=-1),
        exact_hess=_const_hess(2.0, 0.0, 3.0),
        problem=data,
    )


def _coscos(x):
    return np.cos(np.pi * x[..., 0]) * np.cos(np.pi * x[..., 1])


def _coscos_grad(x):
    cx, sx = np.cos(np.pi * x[..., 0]), np.sin(np.pi * x[..., 0])
    cy, sy = np.cos(np.pi * x[..., 1]), np.sin(np.pi * x[..., 1])
    return np.pi * np.stack([-sx * cy, -cx * sy], axis=-1)


def _coscos_hess(x):
    cx, sx = np.cos(np.pi * x[..., 0]), np.sin(np.pi * x[..., 0])
    cy, sy = np.cos(np.pi * x[..., 1]), np.sin(np.pi * x[..., 1])
    h = np.empty(x.shape[:-1] + (2, 2))
    h[..., 0, 0] = -cx * cy
    h[..., 0, 1] = sx * sy
    h[..., 1, 0] = sx * sy
    h[..., 1, 1] = -cx * cy
    return np.pi ** 2 * h


def _oblique_linear_problem(space: FESpace) -> LinearObliqueProblem:
    """Laplace operator with normal-derivative boundary data manufactured
    from the cosine-product solution on the disk."""
    qd = 2 * space.degree + 2
    normals = edge_tables(space, qd)["n"]

    def beta(x):
        return np.einsum("bd,bq->bqd", normals, np.ones(x.shape[:2]))

    def s(x):
        return np.einsum("bqd,bqd->bq", beta(x), _coscos_grad(x))

    return LinearObliqueProblem(
        A=lambda x: np.eye(2),
        r=lambda x: -2.0 * np.pi ** 2 * _coscos(x),
        beta=beta,
        s=s,
    )


def _oblique_linear_case() -> BenchmarkCase:
    return BenchmarkCase(
        name="oblique-linear", kind="linear",
        build_mesh=triangulate_disk,
        exact=_coscos, exact_grad=_coscos_grad, exact_hess=_coscos_hess,
        make_linear=_oblique_linear_problem,
    )


CASES = {
    "disk-disk": _disk_identity_case,
    "disk-ellipse": _disk_ellipse_case,
    "oblique-linear": _oblique_linear_case,
}


def _as_levels(levels) -> list:
    if isinstance(levels, int):
        return list(range(1, levels + 1))
    return [int(lv) for lv in levels]


def run_convergence(case: str, degree: int = 1, recovery: bool = True,
                    levels=4, tol: float = 1e-8, itermax: int = 30,
                    out=None, verbose: bool = False) -> EOCTable:
    """Solve one benchmark case over a mesh-refinement ladder.

    levels: an int L (runs 1..L) or an explicit iterable of levels.
    Solver failures do not abort the ladder; the row keeps the final
    iterate's errors with its status string.  Writes CSV to `out` when
    given (path or file object).
    """
    if case not in CASES:
        raise ValueError(f"unknown case {case!r}; pick one of {sorted(CASES)}")
    bc = CASES[case]()
    table = EOCTable(case=case, degree=degree, recovery=recovery)
    for level in _as_levels(levels):
        mesh = bc.build_mesh(level)
        space = build_space(mesh, degree)
        try:
            u, g, H, iters, status = _solve_case(bc, space, recovery,
                                                 tol, itermax, verbose)
        except (SolverError, ObliquenessError, EllipticityError,
                ValueError, RuntimeError) as exc:
            table.add_row(level, meshsize(mesh), space.n_dofs,
                          {}, 0, f"error: {exc}")
            continue
        if g is None:
            g = recover_gradient(space, u)
        errs = error_norms(space, u, bc.exact, bc.exact_grad, bc.exact_hess,
                           gradient=g, hessian=H)
        table.add_row(level, meshsize(mesh), space.n_dofs, errs,
                      iters, status)
        if verbose:
            print(f"[{case}] level {level}: "
                  + " ".join(f"{k}={errs[k]:.3e}" for k in _ERR_KEYS)
                  + f" iters={iters} status={status}")
    if out is not None:
        table.to_csv(out)
    return table


def _solve_case(bc: BenchmarkCase, space: FESpace, recovery: bool,
                tol: float, itermax: int, verbose: bool):
    if bc.kind == "linear":
        res = solve_oblique(space, bc.make_linear(space), recovery=recovery)
        return res.u, res.g, res.H, 0, "linear"
    opts = SolveOptions(tol=tol, itermax=itermax,
                        recovery="recovered" if recovery else "plain",
                        verbose=verbose)
    state = solve_maot(space, bc.problem, opts)
    return state.u, state.g, state.H, state.iterations, state.status

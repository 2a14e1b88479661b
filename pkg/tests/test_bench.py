"""Convergence harness: rates, tables, CSV schema, registered cases."""

import io
import math

import numpy as np
import pytest

from maot.bench import (
    CASES,
    CSV_HEADER,
    EOCTable,
    eoc,
    error_norms,
    fit_rate,
    parse_csv,
    run_convergence,
)
from maot.fe_space import build_space, interpolate
from maot.mesh import meshsize, triangulate_disk

PINNED_HEADER = ("level,h,N,l2,eoc_l2,h1,eoc_h1,recgrad,eoc_recgrad,"
                 "hess,eoc_hess,iters,status")


def test_csv_header_is_pinned():
    # downstream tooling parses this exact column set; never reorder
    assert CSV_HEADER == PINNED_HEADER


def test_eoc_halving():
    assert eoc([1.0, 0.25], [1.0, 0.5]) == pytest.approx([2.0])
    assert eoc([8.0, 1.0, 0.125], [1.0, 0.5, 0.25]) == pytest.approx([3.0, 3.0])


def test_eoc_input_validation():
    with pytest.raises(ValueError):
        eoc([1.0], [1.0])
    with pytest.raises(ValueError):
        eoc([1.0, 0.5], [1.0])
    with pytest.raises(ValueError):
        eoc([1.0, -0.5], [1.0, 0.5])
    with pytest.raises(ValueError):
        eoc([1.0, 0.5], [1.0, 0.0])


def test_fit_rate_recovers_power_law():
    hs = [0.8, 0.4, 0.2, 0.1]
    errors = [3.7 * h**2.4 for h in hs]
    C, r = fit_rate(hs, errors)
    assert C == pytest.approx(3.7, rel=1e-10)
    assert r == pytest.approx(2.4, rel=1e-10)


def test_fit_rate_skips_invalid_entries():
    hs = [0.8, 0.4, 0.2, 0.1]
    errors = [3.7 * h**2.0 for h in hs]
    errors[1] = math.nan
    C, r = fit_rate(hs, errors)
    assert r == pytest.approx(2.0, rel=1e-10)
    C, r = fit_rate(hs, [math.nan] * 4)
    assert math.isnan(C) and math.isnan(r)


def _toy_table():
    t = EOCTable(case="toy", degree=1, recovery=True)
    errs = {"l2": 1.0, "h1": 2.0, "recgrad": 1.5, "hess": None}
    t.add_row(1, 0.5, 10, errs, 3, "converged")
    errs2 = {"l2": 0.25, "h1": 1.0, "recgrad": 0.375, "hess": None}
    t.add_row(2, 0.25, 33, errs2, 4, "converged")
    return t


def test_table_eoc_columns():
    t = _toy_table()
    assert t.eoc_column("l2") == [None, pytest.approx(2.0)]
    assert t.eoc_column("h1") == [None, pytest.approx(1.0)]
    assert t.eoc_column("hess") == [None, None]  # missing column stays blank
    assert t.column("N") == [10, 33]


def test_table_requires_decreasing_h():
    t = _toy_table()
    with pytest.raises(ValueError):
        t.add_row(3, 0.25, 130, {"l2": 0.1}, 4, "converged")


def test_table_csv_roundtrip(tmp_path):
    t = _toy_table()
    path = tmp_path / "table.csv"
    text = t.to_csv(path)
    assert path.read_text() == text
    assert text.splitlines()[0] == CSV_HEADER
    for rows in (parse_csv(path), parse_csv(text), parse_csv(io.StringIO(text))):
        assert len(rows) == 2
        assert rows[0]["level"] == 1
        assert rows[0]["h"] == 0.5  # exact float round-trip
        assert rows[0]["eoc_l2"] is None
        assert rows[1]["eoc_l2"] == pytest.approx(2.0)
        assert math.isnan(rows[1]["hess"])
        assert rows[1]["status"] == "converged"
        assert rows[1]["N"] == 33


def test_parse_csv_rejects_garbage():
    with pytest.raises(ValueError):
        parse_csv("level,h\n1,0.5\n")
    with pytest.raises(ValueError):
        parse_csv(CSV_HEADER + "\n1,0.5\n")


# ---------------------------------------------------------------------------
# registered cases are internally consistent


@pytest.mark.parametrize("name", ["disk-disk", "disk-ellipse"])
def test_newton_case_solves_its_own_equation(name, rng):
    """det(hessian of the stated solution) must equal rho/sigma."""
    case = CASES[name]()
    r = np.sqrt(rng.uniform(0.0, 1.0, size=200))
    th = rng.uniform(0.0, 2.0 * np.pi, size=200)
    x = np.stack([r * np.cos(th), r * np.sin(th)], axis=-1)
    H = case.exact_hess(x)
    p = case.exact_grad(x)
    det = H[..., 0, 0] * H[..., 1, 1] - H[..., 0, 1] * H[..., 1, 0]
    rhs = case.problem.rho(x) / case.problem.sigma(p)
    assert np.max(np.abs(det - rhs)) < 1e-12


@pytest.mark.parametrize("name", ["disk-disk", "disk-ellipse"])
def test_newton_case_gradient_maps_boundary_to_target(name):
    case = CASES[name]()
    th = np.linspace(0.0, 2.0 * np.pi, 720, endpoint=False)
    x = np.stack([np.cos(th), np.sin(th)], axis=-1)
    p = case.exact_grad(x)
    assert np.max(np.abs(case.problem.target.b(p))) < 1e-6


@pytest.mark.parametrize("name", sorted(CASES))
def test_case_derivatives_match_finite_differences(name, rng):
    case = CASES[name]()
    x = 0.5 * rng.uniform(-1.0, 1.0, size=(40, 2))
    eps = 1e-6
    for a in range(2):
        shift = np.zeros(2)
        shift[a] = eps
        fd = (case.exact(x + shift) - case.exact(x - shift)) / (2 * eps)
        assert np.max(np.abs(fd - case.exact_grad(x)[..., a])) < 1e-6
        fdh = (case.exact_grad(x + shift) - case.exact_grad(x - shift)) / (2 * eps)
        assert np.max(np.abs(fdh - case.exact_hess(x)[..., a])) < 1e-5


def test_registry_contents():
    assert sorted(CASES) == ["disk-disk", "disk-ellipse", "oblique-linear"]
    assert CASES["oblique-linear"]().kind == "linear"
    assert CASES["disk-disk"]().kind == "newton"


# ---------------------------------------------------------------------------
# interpolation converges at the expected order


@pytest.mark.parametrize("degree,expected", [(1, 2.0), (2, 3.0)])
def test_interpolation_eoc_matches_degree(degree, expected):
    f = lambda x: np.exp(x[..., 0]) * np.cos(1.3 * x[..., 1])
    fg = lambda x: np.stack(
        [np.exp(x[..., 0]) * np.cos(1.3 * x[..., 1]),
         -1.3 * np.exp(x[..., 0]) * np.sin(1.3 * x[..., 1])], axis=-1)
    hs, errs = [], []
    for level in (1, 2, 3, 4):
        space = build_space(triangulate_disk(level), degree)
        err = error_norms(space, interpolate(space, f), f, exact_grad=fg)
        hs.append(meshsize(space.mesh))
        errs.append(err["l2"])
    _, r = fit_rate(hs, errs)
    assert r == pytest.approx(expected, abs=0.25)


# ---------------------------------------------------------------------------
# the driver


def test_run_convergence_writes_csv(tmp_path):
    out = tmp_path / "dd.csv"
    table = run_convergence("disk-disk", degree=1, recovery=True,
                            levels=[1, 2], out=out)
    assert isinstance(table, EOCTable)
    assert [row["level"] for row in table.rows] == [1, 2]
    assert all(row["status"] == "converged" for row in table.rows)
    rows = parse_csv(out)
    assert len(rows) == 2
    assert rows[1]["eoc_l2"] is not None
    # errors actually shrink under refinement
    assert rows[1]["l2"] < rows[0]["l2"]


def test_run_convergence_int_levels_means_one_through_l():
    table = run_convergence("oblique-linear", degree=1, recovery=True, levels=2)
    assert [row["level"] for row in table.rows] == [1, 2]


def test_run_convergence_unknown_case():
    with pytest.raises(ValueError):
        run_convergence("no-such-case")

"""End-to-end command line runs against temporary files."""

import json

import numpy as np
import pytest

from maot.bench import parse_csv
from maot.cli import (
    _parse_grid,
    _parse_levels,
    main,
    problem_from_config,
    read_state,
    write_state,
)
from maot.fe_space import build_space
from maot.mesh import read_mesh, triangulate_disk
from maot.nonlinear import SolveOptions, solve_maot
from maot.bench import CASES

pytestmark = [
    pytest.mark.filterwarnings("ignore:beta . n <= 0:RuntimeWarning"),
    pytest.mark.filterwarnings(
        "ignore:diffusion matrix not positive definite:RuntimeWarning"),
    pytest.mark.filterwarnings(
        "ignore:iterate lost discrete convexity:RuntimeWarning"),
]


def test_parse_levels():
    assert _parse_levels("4") == 4
    assert _parse_levels("2,3,5") == (2, 3, 5)


def test_parse_grid():
    assert _parse_grid("9x9") == (9, 9)
    assert _parse_grid("3X12") == (3, 12)
    with pytest.raises(Exception):
        _parse_grid("9")


def test_mesh_subcommand_disk(tmp_path):
    out = tmp_path / "disk.txt"
    assert main(["mesh", "--domain", "disk", "--level", "2",
                 "--out", str(out)]) == 0
    mesh = read_mesh(out)
    assert len(mesh.vertices) == 61      # 1 + 3n(n+1) with n = 4
    assert len(mesh.cells) == 96         # 6 n^2
    assert len(mesh.boundary_edges) == 24


def test_mesh_subcommand_square(tmp_path):
    out = tmp_path / "square.txt"
    assert main(["mesh", "--domain", "square", "--n", "4",
                 "--out", str(out)]) == 0
    mesh = read_mesh(out)
    assert len(mesh.vertices) == 25
    assert len(mesh.cells) == 32


def test_solve_subcommand_writes_state(tmp_path):
    out = tmp_path / "state.txt"
    code = main(["solve", "--case", "disk-disk", "--level", "2",
                 "--out", str(out)])
    assert code == 0
    parsed = read_state(out)
    assert parsed["status"] == "converged"
    assert parsed["residual"] < 1e-8
    assert parsed["degree"] == 1
    assert parsed["recovery"] == "recovered"
    assert parsed["u"].shape == (61, 1)
    assert parsed["gradient"].shape == (61, 2)
    assert parsed["hessian"].shape == (61, 3)


def test_solve_subcommand_plain_recovery(tmp_path):
    out = tmp_path / "state.txt"
    code = main(["solve", "--case", "disk-disk", "--level", "2",
                 "--degree", "2", "--recovery", "plain",
                 "--out", str(out)])
    assert code == 0
    parsed = read_state(out)
    assert parsed["status"] == "converged"
    assert parsed["gradient"].shape[0] == 0


def test_solve_subcommand_custom_config(tmp_path):
    config = {
        "domain": {"shape": "disk", "level": 2},
        "rho": 1.0,
        "sigma": {"poly": [[1.0, 0.0], [0.0, 0.1]]},
        "target": {"shape": "circle", "radius": 1.0},
    }
    cfg = tmp_path / "problem.json"
    cfg.write_text(json.dumps(config))
    out = tmp_path / "state.txt"
    code = main(["solve", "--case", "custom", "--config", str(cfg),
                 "--out", str(out)])
    assert code == 0
    assert read_state(out)["status"] == "converged"


def test_solve_custom_requires_config():
    assert main(["solve", "--case", "custom"]) == 2


def test_solve_reports_nonconvergence(tmp_path):
    out = tmp_path / "state.txt"
    code = main(["solve", "--case", "disk-disk", "--level", "2",
                 "--itermax", "1", "--out", str(out)])
    assert code == 1
    assert read_state(out)["status"] == "itermax"


def test_solve_rejects_unknown_case():
    with pytest.raises(SystemExit):
        main(["solve", "--case", "no-such-case"])


def test_bench_subcommand_csv(tmp_path):
    out = tmp_path / "table.csv"
    code = main(["bench", "--case", "disk-disk", "--levels", "1,2",
                 "--out", str(out)])
    assert code == 0
    rows = parse_csv(out)
    assert [row["level"] for row in rows] == [1, 2]
    assert all(row["status"] == "converged" for row in rows)


def test_oblique_subcommand_csv(tmp_path):
    out = tmp_path / "oblique.csv"
    code = main(["oblique", "--levels", "2", "--out", str(out)])
    assert code == 0
    rows = parse_csv(out)
    assert len(rows) == 2
    assert rows[1]["l2"] < rows[0]["l2"]


def test_image_subcommand_svg(tmp_path):
    pgm = tmp_path / "white.pgm"
    pgm.write_text("P2\n2 2\n255\n255 255 255 255\n")
    svg = tmp_path / "grid.svg"
    code = main(["image", "--input", str(pgm), "--mesh-n", "8",
                 "--grid", "3x3", "--out", str(svg)])
    assert code == 0
    assert svg.read_text().count("<path ") == 6


def test_image_subcommand_missing_input(tmp_path):
    svg = tmp_path / "grid.svg"
    code = main(["image", "--input", str(tmp_path / "nope.pgm"),
                 "--out", str(svg)])
    assert code != 0
    assert not svg.exists()


def test_state_roundtrip_is_exact(tmp_path):
    space = build_space(triangulate_disk(2), 1)
    case = CASES["disk-disk"]()
    state = solve_maot(space, case.problem, SolveOptions(tol=1e-10))
    path = tmp_path / "state.txt"
    write_state(path, space, state, "recovered")
    parsed = read_state(path)
    assert parsed["iterations"] == state.iterations
    assert parsed["residual"] == state.residual       # repr round-trip
    assert parsed["multiplier"] == state.c
    assert np.array_equal(parsed["u"][:, 0], state.u)
    assert np.array_equal(parsed["gradient"][:, 0], state.g.components[0])
    assert np.array_equal(parsed["hessian"][:, 2], state.H.components[2])


def test_read_state_rejects_wrong_layout(tmp_path):
    path = tmp_path / "state.txt"
    path.write_text("nonsense 1\n")
    with pytest.raises(ValueError):
        read_state(path)


def test_problem_from_config_polynomial_sigma():
    config = {
        "rho": 2.0,
        "sigma": {"poly": [[1.0, 0.0], [0.0, 0.5]]},
        "target": {"shape": "square", "side": 2.0},
    }
    data = problem_from_config(config)
    p = np.array([[0.5, 1.0], [0.0, 0.0]])
    assert np.allclose(data.sigma(p), [1.25, 1.0])    # 1 + 0.5 x y
    assert np.allclose(data.grad_sigma(p), [[0.5, 0.25], [0.0, 0.0]])
    x = np.zeros((3, 2))
    assert np.allclose(data.rho(x), 2.0)
    assert data.target.shape == "square"

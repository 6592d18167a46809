"""Command front end: files written, exit codes, determinism, overrides."""

import json

import pytest

from polyieti import cli
from polyieti.domains import load_domain


def run(*argv):
    return cli.main(list(argv))


# --- generate ---------------------------------------------------------------

@pytest.mark.parametrize("name,npatches,nedges", [
    ("square1", 1, 0),
    ("strip2", 2, 1),
    ("corner3L", 3, 2),
])
def test_generate_roundtrips(tmp_path, name, npatches, nedges):
    path = tmp_path / f"{name}.json"
    assert run("generate", name, str(path), "--smoothness", "1") == 0
    dom = load_domain(path)
    assert dom.n_patches == npatches
    assert len(dom.inner_edges) == nedges


def test_generate_unknown_name(tmp_path, capsys):
    assert run("generate", "pentagon", str(tmp_path / "d.json")) == 2
    assert "unknown built-in domain" in capsys.readouterr().err


def test_generate_unwritable_path(tmp_path, capsys):
    assert run("generate", "square1", str(tmp_path / "no" / "dir" / "d.json")) == 1
    assert "io failure" in capsys.readouterr().err


# --- solve ------------------------------------------------------------------

def test_solve_writes_solution_and_diagnostics(tmp_path):
    out = tmp_path / "run"
    code = run("solve", "--domain", "corner3L", "--m", "2", "--s", "1",
               "--p", "3", "--r", "1", "--k", "1", "--out", str(out))
    assert code == 0
    sol = json.loads((out / "solution.json").read_text())
    diag = json.loads((out / "diagnostics.json").read_text())
    assert len(sol["coefficients"]) == 3
    assert diag["seminorm_error"] < 0.05
    assert diag["smoothness"]["max_edge_jump"] <= 1e-8
    assert diag["momentum_residual"] <= 1e-8 * diag["scale"]
    assert diag["config"]["domain"] == "corner3L"


def test_solve_zero_exact_field_fails_relative_error(tmp_path, capsys):
    # The reported error is relative; a vanishing exact seminorm leaves it
    # undefined, which the command surfaces as a numerical failure.
    out = tmp_path / "zero"
    code = run("solve", "--domain", "strip2", "--m", "1", "--s", "0",
               "--p", "2", "--r", "1", "--k", "1",
               "--solution", "zero", "--out", str(out))
    assert code == 1
    assert "numerically zero" in capsys.readouterr().err
    assert not (out / "solution.json").exists()


def test_solve_reproduces_linear_field_exactly(tmp_path):
    # A linear field lies in every spline space and has zero load; the
    # harmonic solve must reproduce it to rounding.
    out = tmp_path / "lin"
    code = run("solve", "--domain", "strip2", "--m", "1", "--s", "0",
               "--p", "2", "--r", "1", "--k", "1",
               "--solution", "linear", "--out", str(out))
    assert code == 0
    diag = json.loads((out / "diagnostics.json").read_text())
    assert diag["seminorm_error"] < 1e-12


def test_solve_from_domain_file(tmp_path):
    dompath = tmp_path / "dom.json"
    assert run("generate", "strip2", str(dompath), "--smoothness", "1") == 0
    out = tmp_path / "run"
    code = run("solve", "--domain", str(dompath), "--m", "2", "--s", "1",
               "--p", "3", "--r", "1", "--k", "1", "--out", str(out))
    assert code == 0
    assert (out / "diagnostics.json").exists()


def test_solve_invalid_parameters_names_inequality(tmp_path, capsys):
    code = run("solve", "--domain", "strip2", "--m", "2", "--s", "0",
               "--p", "3", "--r", "1", "--k", "1", "--out", str(tmp_path))
    assert code == 2
    assert "s >= m - 1" in capsys.readouterr().err


def test_solve_domain_file_with_too_little_gluing(tmp_path, capsys):
    dompath = tmp_path / "dom.json"
    assert run("generate", "strip2", str(dompath), "--smoothness", "0") == 0
    code = run("solve", "--domain", str(dompath), "--m", "2", "--s", "1",
               "--p", "3", "--r", "1", "--k", "1", "--out", str(tmp_path))
    assert code == 2
    assert "gluing data" in capsys.readouterr().err


def test_solve_numerical_failure_names_stage(tmp_path, capsys):
    code = run("solve", "--domain", "corner3L", "--m", "2", "--s", "1",
               "--p", "3", "--r", "1", "--k", "1",
               "--max-iter", "1", "--out", str(tmp_path))
    assert code == 1
    err = capsys.readouterr().err
    assert "numerical failure" in err
    assert "[dual]" in err


def test_solve_config_file_with_flag_override(tmp_path):
    cfgpath = tmp_path / "cfg.json"
    cfgpath.write_text(json.dumps({
        "domain": "strip2", "m": 1, "s": 0, "p": 2, "r": 1, "k": 1,
        "out": str(tmp_path / "a")}))
    assert run("solve", "--config", str(cfgpath)) == 0
    assert run("solve", "--config", str(cfgpath), "--out",
               str(tmp_path / "b"), "--k", "2") == 0
    a = json.loads((tmp_path / "a" / "solution.json").read_text())
    b = json.loads((tmp_path / "b" / "solution.json").read_text())
    assert b["config"]["k"] == 2
    assert len(b["coefficients"][0]) > len(a["coefficients"][0])


def test_config_unknown_key_rejected(tmp_path, capsys):
    cfgpath = tmp_path / "cfg.json"
    cfgpath.write_text(json.dumps({"domain": "strip2", "degree": 2}))
    assert run("solve", "--config", str(cfgpath)) == 2
    assert "unknown config keys" in capsys.readouterr().err


def test_config_invalid_json_rejected(tmp_path, capsys):
    cfgpath = tmp_path / "cfg.json"
    cfgpath.write_text("{not json")
    assert run("solve", "--config", str(cfgpath)) == 2
    assert "invalid JSON" in capsys.readouterr().err


# --- convergence ------------------------------------------------------------

def test_convergence_csv_layout(tmp_path):
    out = tmp_path / "cv"
    code = run("convergence", "--domain", "strip2", "--m", "1", "--s", "0",
               "--p", "2", "--r", "1", "--levels", "2", "--h0", "0.5",
               "--out", str(out))
    assert code == 0
    lines = (out / "convergence.csv").read_text().strip().splitlines()
    assert lines[0] == "level,h,dof,error,observed_order"
    assert len(lines) == 3
    first = lines[1].split(",")
    assert first[0] == "0" and first[1] == "0.5" and first[4] == ""
    second = lines[2].split(",")
    assert 1.5 < float(second[4]) < 2.5
    plot = (out / "plot_data.csv").read_text().strip().splitlines()
    assert plot[0] == "log10_h,log10_error"
    assert len(plot) == 3


def test_convergence_single_level_empty_order_column(tmp_path):
    out = tmp_path / "cv1"
    code = run("convergence", "--domain", "square1", "--m", "1", "--s", "0",
               "--p", "2", "--r", "1", "--levels", "1", "--h0", "1.0",
               "--out", str(out))
    assert code == 0
    lines = (out / "convergence.csv").read_text().strip().splitlines()
    assert len(lines) == 2
    assert lines[1].endswith(",")


def test_convergence_deterministic_bytes(tmp_path):
    argv = ["convergence", "--domain", "strip2", "--m", "1", "--s", "0",
            "--p", "2", "--r", "1", "--levels", "2", "--h0", "0.5"]
    assert run(*argv, "--out", str(tmp_path / "r1")) == 0
    assert run(*argv, "--out", str(tmp_path / "r2")) == 0
    for name in ("convergence.csv", "plot_data.csv"):
        assert (tmp_path / "r1" / name).read_bytes() == \
            (tmp_path / "r2" / name).read_bytes()


# --- rank study -------------------------------------------------------------

def test_rank_study_contains_known_cells(tmp_path):
    out = tmp_path / "rk"
    code = run("rank-study", "--m", "2", "--pairs", "2:1,3:1",
               "--k-values", "0", "--random", "0", "--out", str(out))
    assert code == 0
    lines = (out / "rank_study.csv").read_text().strip().splitlines()
    assert lines[0] == "m,p,r,k,patch,deficiency,bound"
    assert "2,2,1,0,identity,5,6" in lines
    assert "2,3,1,0,identity,8,8" in lines


def test_rank_study_triharmonic_cell(tmp_path):
    out = tmp_path / "rk3"
    code = run("rank-study", "--m", "3", "--pairs", "3:2",
               "--k-values", "0", "--random", "0", "--out", str(out))
    assert code == 0
    assert "3,3,2,0,identity,9,9" in \
        (out / "rank_study.csv").read_text().strip().splitlines()


def test_rank_study_empty_grid_header_only(tmp_path):
    out = tmp_path / "rk0"
    assert run("rank-study", "--m", "2", "--pairs", "", "--out", str(out)) == 0
    assert (out / "rank_study.csv").read_text().strip() == \
        "m,p,r,k,patch,deficiency,bound"


def test_rank_study_bad_pair_syntax(tmp_path, capsys):
    assert run("rank-study", "--m", "2", "--pairs", "2-1",
               "--out", str(tmp_path)) == 2
    assert "expected like 3:1" in capsys.readouterr().err

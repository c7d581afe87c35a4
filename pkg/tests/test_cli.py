"""End-to-end tests of the batch CLI: configs in, stamped artifacts out."""
from __future__ import annotations

import json
import math
import subprocess
import sys

import numpy as np
import pytest
from numpy.testing import assert_allclose

from conelab.cli import main
from conelab.grids import ScalarGrid, load_grid, save_grid
from conelab.pde import manufactured

CONE_INCREMENT = math.log(2.0) / (3.0 * math.sqrt(3.0))


def run(tmp_path, command, cfg=None, *extra):
    args = [command, "--out", str(tmp_path)]
    if cfg is not None:
        path = tmp_path / f"{command}_cfg.json"
        path.write_text(json.dumps({"schema_version": 1, command: cfg}))
        args += ["--config", str(path)]
    return main(args + list(extra))


def read_csv(path):
    lines = path.read_bytes().decode().split("\r\n")
    assert lines[0].startswith("# schema_version=1 config_digest=")
    assert lines[-1] == ""
    header = lines[1].split(",")
    rows = [line.split(",") for line in lines[2:-1]]
    return header, rows


# ---------------------------------------------------------------- coeffs

def test_coeffs_default_grid_goldens(tmp_path):
    assert run(tmp_path, "coeffs") == 0
    header, rows = read_csv(tmp_path / "coeffs.csv")
    assert header[:6] == ["delta", "Ax", "Ay", "Az", "A", "kappa"]
    assert len(rows) == 101
    first, last = rows[0], rows[-1]
    assert float(first[0]) == 0.0
    assert float(first[4]) == pytest.approx(-4.0 * math.pi / math.sqrt(3.0),
                                            abs=1e-6)
    assert float(first[3]) == pytest.approx(-4.0 * math.pi
                                            / (9.0 * math.sqrt(3.0)),
                                            abs=1e-6)
    assert float(last[0]) == 0.5
    assert float(last[4]) == pytest.approx(-2.0 * math.pi, abs=1e-6)
    assert float(last[2]) == pytest.approx(-2.0 * math.pi / 3.0, abs=1e-6)


def test_coeffs_reruns_are_byte_identical(tmp_path):
    cfg = {"deltas": [0.5], "level": 64}
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    assert run(a, "coeffs", cfg) == 0
    assert run(b, "coeffs", cfg) == 0
    assert (a / "coeffs.csv").read_bytes() == (b / "coeffs.csv").read_bytes()


def test_coeffs_empty_grid_rejected(tmp_path, capsys):
    assert run(tmp_path, "coeffs", {"deltas": []}) == 2
    assert not (tmp_path / "coeffs.csv").exists()
    assert "empty" in capsys.readouterr().err


def test_coeffs_unknown_key_rejected(tmp_path, capsys):
    assert run(tmp_path, "coeffs", {"delats": [0.1]}) == 2
    assert "delats" in capsys.readouterr().err


def test_top_level_schema_checked(tmp_path, capsys):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"schema_version": 2, "coeffs": {}}))
    assert main(["coeffs", "--out", str(tmp_path),
                 "--config", str(path)]) == 2
    path.write_text(json.dumps({"schema_version": 1, "coeffs": {},
                                "zp": {}}))
    assert main(["coeffs", "--out", str(tmp_path),
                 "--config", str(path)]) == 2
    assert "zp" in capsys.readouterr().err


# ---------------------------------------------------------------- zp

def test_zp_csv_layout(tmp_path):
    cfg = {"delta": 0.25, "dims": 9, "lmax": 8, "level": 16}
    assert run(tmp_path, "zp", cfg) == 0
    header, rows = read_csv(tmp_path / "zp.csv")
    assert header == ["x", "y", "z", "value"]
    assert len(rows) == 9 ** 3
    assert [float(v) for v in rows[0][:3]] == [-1.0, -1.0, -1.0]
    # C order: z advances fastest
    assert float(rows[1][2]) == pytest.approx(-0.75)
    assert float(rows[1][0]) == -1.0


def test_zp_raw_grid_roundtrip(tmp_path):
    base = {"delta": 0.25, "dims": 9, "lmax": 8, "level": 16}
    assert run(tmp_path, "zp", base) == 0
    assert run(tmp_path, "zp", {**base, "format": "raw"}) == 0
    grid = load_grid(tmp_path / "zp.f64")
    assert grid.dims == (9, 9, 9)
    assert grid.spacing == pytest.approx(0.25)
    sidecar = json.loads((tmp_path / "zp.f64.json").read_text())
    assert sidecar["schema_version"] == 1
    assert len(sidecar["config_digest"]) == 64
    assert sidecar["config"]["zp"]["format"] == "raw"
    _, rows = read_csv(tmp_path / "zp.csv")
    assert grid.values[0, 0, 0] == float(rows[0][3])


# ---------------------------------------------------------------- renorm

def test_renorm_attractor_matrix(tmp_path):
    # 0.49 needs this many halvings before the rate fit has a tail to work
    # with; by then an exactly-on-ray start would have rounding-escaped the
    # unstable ray, so the ray case runs separately below at a short horizon
    cfg = {"delta0": [0.25, 0.49], "tau0": 30.0, "steps": 20000}
    assert run(tmp_path, "renorm", cfg, "--workers", "2") == 0
    summary = json.loads((tmp_path / "renorm_summary.json").read_text())
    trajectories = summary["trajectories"]
    assert [t["label"] for t in trajectories] == ["p0", "p0"]
    for t in trajectories:
        assert t["rate"]["c"] > 0.0
        assert t["final_delta"] < 0.1
        assert 0.10 <= t["increment_min"] <= t["increment_max"] <= 0.14
    header, rows = read_csv(tmp_path / "renorm_000.csv")
    assert header[:5] == ["k", "tau", "delta", "increment", "alignment"]
    assert len(header) == 14
    assert len(rows) == 20001
    assert float(rows[0][2]) == 0.25


def test_renorm_ray_label(tmp_path):
    assert run(tmp_path, "renorm", {"delta0": 0.5, "steps": 1000}) == 0
    summary = json.loads((tmp_path / "renorm_summary.json").read_text())
    t = summary["trajectories"][0]
    assert t["label"] == "p3 ray (unstable)"
    assert t["rate"] is None and t["rate_error"] is None
    assert t["final_delta"] == pytest.approx(0.5, abs=1e-9)


def test_renorm_unconverged_exit_code(tmp_path):
    cfg = {"delta0": 0.3, "steps": 100}
    assert run(tmp_path, "renorm", cfg) == 3
    assert not (tmp_path / "renorm_summary.json").exists()
    assert not (tmp_path / "renorm_000.csv").exists()


def test_renorm_allow_unconverged_reports_null_rate(tmp_path):
    cfg = {"delta0": 0.3, "steps": 100}
    assert run(tmp_path, "renorm", cfg, "--allow-unconverged") == 0
    summary = json.loads((tmp_path / "renorm_summary.json").read_text())
    t = summary["trajectories"][0]
    assert t["rate"] is None
    assert "alignment" in t["rate_error"]
    assert (tmp_path / "renorm_000.csv").exists()


def test_renorm_empty_matrix_rejected(tmp_path):
    assert run(tmp_path, "renorm", {"delta0": []}) == 2


def test_renorm_seed_flag_matches_config_seed(tmp_path):
    noise = {"alpha": 0.2, "c1": 1.0}
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    assert run(a, "renorm", {"delta0": 0.3, "steps": 50, "noise": noise,
                             "seeds": [7]}, "--allow-unconverged") == 0
    assert run(b, "renorm", {"delta0": 0.3, "steps": 50, "noise": noise},
               "--allow-unconverged", "--seed", "7") == 0
    assert (a / "renorm_000.csv").read_bytes() \
        == (b / "renorm_000.csv").read_bytes()


# ---------------------------------------------------------------- solve

def test_solve_manufactured_report(tmp_path):
    cfg = {"boundary": {"kind": "manufactured", "tau": 30.0, "delta": 0.0,
                        "lmax": 24},
           "dims": 33}
    assert run(tmp_path, "solve", cfg) == 0
    report = json.loads((tmp_path / "solve_report.json").read_text())
    assert report["report"]["converged"] is True
    assert report["relative_error"] <= 0.02
    grid = load_grid(tmp_path / "solution.f64")
    assert grid.dims == (33, 33, 33)
    sidecar = json.loads((tmp_path / "solution.f64.json").read_text())
    assert sidecar["config_digest"] == report["config_digest"]


def test_solve_negative_boundary_has_empty_positive_set(tmp_path):
    cfg = {"boundary": {"kind": "constant", "value": -1.0}, "dims": 17}
    assert run(tmp_path, "solve", cfg) == 0
    report = json.loads((tmp_path / "solve_report.json").read_text())
    assert report["report"]["positive_set_nodes"] == 0
    assert "relative_error" not in report


def test_solve_malformed_config_names_line_and_column(tmp_path, capsys):
    path = tmp_path / "broken.json"
    path.write_text('{"schema_version": 1,\n "solve": {')
    assert main(["solve", "--out", str(tmp_path),
                 "--config", str(path)]) == 2
    err = capsys.readouterr().err
    assert "line 2" in err and "column" in err


def test_solve_iteration_cap(tmp_path):
    cfg = {"boundary": {"kind": "manufactured", "tau": 30.0, "delta": 0.0,
                        "lmax": 24},
           "dims": 33, "max_outer": 2}
    assert run(tmp_path, "solve", cfg) == 4
    assert run(tmp_path, "solve", cfg, "--allow-unconverged") == 0
    report = json.loads((tmp_path / "solve_report.json").read_text())
    assert report["report"]["converged"] is False


# ---------------------------------------------------------------- blowup

@pytest.fixture(scope="module")
def stored_grids(tmp_path_factory):
    root = tmp_path_factory.mktemp("grids")
    cone = root / "cone65.f64"
    cross = root / "cross65.f64"
    smooth = root / "smooth65.f64"
    save_grid(manufactured(30.0, 0.0, lmax=24, dims=65), cone)
    save_grid(manufactured(30.0, 0.5, lmax=24, dims=65), cross)
    save_grid(ScalarGrid.sample(lambda p: (p ** 2).sum(axis=1) - 0.2,
                                (-1.0,) * 3, 1.0 / 32, (65,) * 3), smooth)
    return {"cone": cone, "cross": cross, "smooth": smooth}


def test_blowup_cone_grid_classified_s1(tmp_path, stored_grids):
    cfg = {"grid": str(stored_grids["cone"]), "r0": 0.5, "levels": 2}
    assert run(tmp_path, "blowup", cfg) == 0
    report = json.loads((tmp_path / "blowup_report.json").read_text())
    cls = report["classification"]
    assert cls["label"] == "S1_plus"
    assert cls["thresholds"]["delta_s1"] == 0.15
    assert report["fit"]["mode"] == "cone"
    assert report["fit"]["axis_angle_deg"] <= 2.0
    header, rows = read_csv(tmp_path / "blowup_trajectory.csv")
    assert header == ["j", "r", "tau", "delta", "sign", "sup_u", "residue"]
    assert len(rows) == 2
    assert rows[0][4] == "+"
    ply = (tmp_path / "free_boundary.ply").read_text().split("\n")
    assert ply[0] == "ply"
    assert any(line.startswith("comment config_digest") for line in ply[:8])


def test_blowup_cross_grid_classified_s2(tmp_path, stored_grids):
    cfg = {"grid": str(stored_grids["cross"]), "r0": 0.5, "levels": 2}
    assert run(tmp_path, "blowup", cfg) == 0
    report = json.loads((tmp_path / "blowup_report.json").read_text())
    assert report["classification"]["label"] == "S2"
    fit = report["fit"]
    assert fit["mode"] == "cross"
    assert max(fit["plane_angles_deg"]) <= 2.0
    assert fit["dihedral_deg"] == pytest.approx(90.0, abs=2.0)


def test_blowup_smooth_grid_is_regular(tmp_path, stored_grids):
    cfg = {"grid": str(stored_grids["smooth"]), "r0": 0.5, "levels": 2}
    assert run(tmp_path, "blowup", cfg) == 0
    report = json.loads((tmp_path / "blowup_report.json").read_text())
    assert report["classification"]["label"] == "regular"
    assert report["fit"] is None


def test_blowup_too_coarse_exit_code(tmp_path, stored_grids):
    cfg = {"grid": str(stored_grids["cone"]), "r0": 0.0625, "levels": 1}
    assert run(tmp_path, "blowup", cfg) == 5


# ---------------------------------------------------------------- verify

def test_verify_filter_runs_subset(tmp_path, capsys):
    assert main(["verify", "--out", str(tmp_path),
                 "--filter", "kappa"]) == 0
    out = capsys.readouterr().out
    lines = [ln for ln in out.splitlines() if ln.startswith(("PASS", "FAIL"))]
    assert len(lines) == 3
    assert all("kappa." in ln for ln in lines)
    report = json.loads((tmp_path / "verify_report.json").read_text())
    assert report["all_passed"] is True
    assert report["counts"] == {"passed": 3, "failed": 0}


def test_verify_tightened_tolerance_fails(tmp_path, capsys):
    cfg = {"tol_scale": 0.01, "filter": "pde.manufactured"}
    assert run(tmp_path, "verify", cfg) == 1
    assert "FAIL pde.manufactured_33" in capsys.readouterr().out
    report = json.loads((tmp_path / "verify_report.json").read_text())
    assert report["all_passed"] is False


def test_verify_unmatched_filter_rejected(tmp_path):
    assert main(["verify", "--out", str(tmp_path),
                 "--filter", "nosuchcheck"]) == 2


# ---------------------------------------------------------------- process level

def test_module_entry_point(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"schema_version": 1,
                               "coeffs": {"deltas": [0.0], "level": 16}}))
    proc = subprocess.run(
        [sys.executable, "-m", "conelab.cli", "coeffs",
         "--config", str(cfg), "--out", str(tmp_path)],
        capture_output=True, text=True)
    assert proc.returncode == 0
    assert "wrote" in proc.stdout
    # timing goes to stderr so output files and stdout stay deterministic
    assert "coeffs:" in proc.stderr

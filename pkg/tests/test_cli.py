import csv
import json

import pytest

from mtsb import __version__
from mtsb.cli import main


def run(tmp_path, *argv):
    return main([*argv, "--out", str(tmp_path)])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def snapshot(d):
    return {f.name: f.read_bytes() for f in sorted(d.iterdir()) if f.name != "manifest.json"}


def test_psp_command(tmp_path):
    assert run(tmp_path, "psp", "--G", "8") == 0
    rows = read_csv(tmp_path / "psp.csv")
    assert len(rows) == 1
    assert float(rows[0]["v_p"]) == pytest.approx(-60.4, rel=0.01)
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["classification"] in ("saddle", "node", "focus")


def test_manifest_contents(tmp_path):
    run(tmp_path, "psp", "--G", "8", "--set", "a5=0.0943")
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["schema_version"] == 1
    assert m["version"] == __version__
    assert m["command"] == "psp"
    assert m["exit_code"] == 0 and m["error"] is None
    assert m["params"]["G"] == 8.0
    assert m["argv"][:3] == ["psp", "--G", "8"]
    assert set(m["integrator"]) >= {"rtol", "atol", "h_max"}
    assert "psp.csv" in m["files"] and "summary.json" in m["files"]


def test_rerun_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert run(d, "normalform", "--G", "8") == 0
    assert snapshot(a) == snapshot(b)


def test_json_format(tmp_path):
    assert run(tmp_path, "normalform", "--G", "8", "--format", "json") == 0
    data = json.loads((tmp_path / "coefficients.json").read_text())
    assert data["columns"] == ["name", "value"]
    assert {r[0] for r in data["rows"]} >= {"H_XX", "F_Z", "G_10"}


def test_unknown_parameter_is_fatal(tmp_path, capsys):
    assert run(tmp_path, "psp", "--set", "bogus=1") == 1
    assert "unknown parameter" in capsys.readouterr().err


def test_bad_parameter_value_is_fatal(tmp_path):
    assert run(tmp_path, "psp", "--set", "s1=0") == 1


def test_psp_not_found_is_fatal_with_manifest(tmp_path):
    assert run(tmp_path, "psp", "--G", "2") == 1
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["exit_code"] == 1 and m["error"]


def test_params_file(tmp_path):
    pf = tmp_path / "p.txt"
    pf.write_text("G = 9.5\n")
    assert run(tmp_path / "o", "psp", "--params", str(pf)) == 0
    m = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert m["params"]["G"] == 9.5


def test_env_output_directory(tmp_path, monkeypatch):
    monkeypatch.setenv("MTSB_OUT", str(tmp_path / "env"))
    assert main(["psp", "--G", "8"]) == 0
    assert (tmp_path / "env" / "psp.csv").exists()


def test_eigen_sweep_command(tmp_path):
    assert run(tmp_path, "psp", "--G-from", "7", "--G-to", "9", "--step", "0.5") == 0
    rows = read_csv(tmp_path / "eigen_sweep.csv")
    assert [float(r["G"]) for r in rows] == [7.0, 7.5, 8.0, 8.5, 9.0]


def test_simulate_command(tmp_path):
    assert run(tmp_path, "simulate", "--G", "13", "--t-min", "20", "--every", "10", "--plot") == 0
    rows = read_csv(tmp_path / "trajectory.csv")
    assert list(rows[0]) == ["t", "v", "u", "x", "y", "z"]
    assert float(rows[-1]["t"]) == pytest.approx(20 * 60_000)
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["complete_bursts"] >= 2
    assert (tmp_path / "plot.gp").exists()


def test_manifold_command(tmp_path):
    code = run(tmp_path, "manifold", "--G", "8", "--kind", "C1", "--resolution", "8")
    assert code in (0, 2)
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["nodes"] == 64
    assert (code == 2) == (summary["flagged"] > 0)


def test_usage_errors(tmp_path):
    assert run(tmp_path, "network", "--N", "0") == 1
    assert run(tmp_path, "network", "--k", "-1") == 1
    assert run(tmp_path, "psp", "--jobs", "0") == 1

import json

import pytest

from cli import CHECKS, run
from config import RunConfig
from storage import write_columns


def stderr_json(capsys):
    err = capsys.readouterr().err
    return json.loads(err[err.index("{"):])


@pytest.fixture
def xyz_csv(tmp_path):
    path = str(tmp_path / "xyz.csv")
    write_columns(path, {"s": [-2.0, -1.0, 0.0], "x": [1.0, 1.0, 1.0],
                         "y": [0.0, 0.0, 0.0], "z": [0.0, 0.0, 0.0]})
    return path


def test_mz_check_first_branch(xyz_csv, tmp_path, capsys):
    out = str(tmp_path / "verdict.json")
    assert run(["mz", "check", "--csv", xyz_csv, "--eps", "0.01", "--out", out]) == 0
    verdict = json.loads(capsys.readouterr().out)
    assert verdict["branch"] == "first"
    assert verdict["hypotheses_ok"] is True
    with open(out, encoding="utf-8") as f:
        assert json.load(f) == verdict


def test_output_is_deterministic(xyz_csv, capsys):
    run(["mz", "check", "--csv", xyz_csv])
    first = capsys.readouterr().out
    run(["mz", "check", "--csv", xyz_csv])
    assert capsys.readouterr().out == first


def test_unknown_flag_is_usage_error(xyz_csv, capsys):
    assert run(["mz", "check", "--csv", xyz_csv, "--bogus"]) == 1
    assert "error" in capsys.readouterr().err


def test_missing_subcommand_is_usage_error(capsys):
    assert run(["expander"]) == 1


def test_numerical_failure_writes_json(tmp_path, capsys):
    path = str(tmp_path / "bad.csv")
    write_columns(path, {"s": [0.0, 1.0], "x": [-1.0, 1.0], "y": [0.0, 0.0], "z": [0.0, 0.0]})
    assert run(["mz", "check", "--csv", path]) == 2
    error = stderr_json(capsys)
    assert error["success"] is False
    assert error["error"] == "precondition"


def test_missing_input_is_config_error(tmp_path, capsys):
    assert run(["mz", "check", "--csv", str(tmp_path / "missing.csv")]) == 1
    assert stderr_json(capsys)["error"] == "config"


def test_unknown_config_key(xyz_csv, tmp_path, capsys):
    config = tmp_path / "run.json"
    config.write_text(json.dumps({"h": 0.02, "colour": "blue"}), encoding="utf-8")
    assert run(["--config", str(config), "mz", "check", "--csv", xyz_csv]) == 1
    assert stderr_json(capsys)["keys"] == ["colour"]


def test_match_then_spectrum(tmp_path, capsys):
    profile = str(tmp_path / "sheet.csv")
    assert run(["expander", "match", "--slope", "0.5", "--out", profile]) == 0
    matched = json.loads(capsys.readouterr().out)
    assert matched["topology"] == "disconnected-sheet"

    spec_path = str(tmp_path / "spec.json")
    assert run(["spectrum", "--profile", profile, "--modes", "4", "--out", spec_path]) == 0
    spectrum = json.loads(capsys.readouterr().out)
    assert len(spectrum["lambdas"]) == 4
    assert spectrum["modes"] == 4

    assert run(["entropy", "check", "--spec", spec_path, "--profile", profile, "--v", "mode:1:1e-3"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert 0.0 < report["pullback_residual"] < 1e-2


def test_mode_check_includes_inequality_system(neck, ancient):
    result = CHECKS["mode_dominance"](RunConfig(), {"neck": neck, "ancient": ancient})
    system = result["mode_system"]
    assert system["window"][1] <= -3.0
    assert system["passed"] and system["C_empirical"] <= 10.0
    assert result["passed"]

import json

import numpy as np
import pytest

from bifdr.cli import main
from bifdr.model import Dataset
from bifdr.simulate import DgpConfig, gen_experiment


@pytest.fixture
def csv_data(tmp_path):
    data, _ = gen_experiment(DgpConfig(experiment=1, n=120, p=3, seed=4))
    path = tmp_path / "data.csv"
    data.to_csv(path)
    return path


def run(argv):
    return main([str(a) for a in argv])


def test_estimate_lin_json(tmp_path, csv_data):
    out = tmp_path / "est.json"
    code = run(["estimate", "--data", csv_data, "--functional", "expected_product",
                "--lambda", "0.05", "--seed", "7", "--out", out])
    assert code == 0
    result = json.loads(out.read_text())
    assert result["algorithm"] == "lin"
    assert result["functional"] == "expected_product"
    assert result["n"] == 120
    assert result["ci"][0] <= result["chi_hat"] <= result["ci"][1]
    manifest = json.loads((tmp_path / "est.json.manifest.json").read_text())
    assert manifest["command"] == "estimate"
    assert manifest["seed"] == 7
    assert "wall_time_s" in manifest


def test_estimate_dispatch_nonlin_and_mix(tmp_path, csv_data):
    out = tmp_path / "e.json"
    code = run(["estimate", "--data", csv_data, "--functional", "expected_product",
                "--link-a", "exp", "--link-b", "exp", "--lambda", "0.05",
                "--out", out])
    assert code == 0
    assert json.loads(out.read_text())["algorithm"] == "nonlin"
    code = run(["estimate", "--data", csv_data, "--functional", "expected_product",
                "--link-b", "exp", "--lambda", "0.05", "--out", out])
    assert code == 0
    assert json.loads(out.read_text())["algorithm"] == "mix"


def test_estimate_determinism(tmp_path, csv_data):
    out1, out2 = tmp_path / "a.json", tmp_path / "b.json"
    for out in (out1, out2):
        assert run(["estimate", "--data", csv_data, "--functional",
                    "expected_product", "--lambda", "cv", "--seed", "3",
                    "--out", out]) == 0
    assert out1.read_bytes() == out2.read_bytes()


def test_estimate_data_errors(tmp_path):
    out = tmp_path / "x.json"
    assert run(["estimate", "--data", tmp_path / "missing.csv",
                "--functional", "expected_product", "--out", out]) == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("y,d,z1\n1.0,oops,0.3\n")
    assert run(["estimate", "--data", bad, "--functional", "expected_product",
                "--out", out]) == 2


def test_estimate_solver_error(tmp_path, csv_data):
    out = tmp_path / "x.json"
    code = run(["estimate", "--data", csv_data, "--functional", "expected_product",
                "--lambda", "1e-9", "--tol", "1e-15", "--max-iter", "2",
                "--out", out])
    assert code == 3


def test_estimate_folds_mismatch(tmp_path, csv_data):
    out = tmp_path / "x.json"
    code = run(["estimate", "--data", csv_data, "--functional", "expected_product",
                "--lambda", "0.05", "--folds", "3", "--out", out])
    assert code == 2


def test_missing_out_is_argument_error(csv_data):
    assert run(["estimate", "--data", csv_data,
                "--functional", "expected_product"]) == 2


def test_unknown_functional(tmp_path, csv_data):
    assert run(["estimate", "--data", csv_data, "--functional", "nope",
                "--out", tmp_path / "x.json"]) == 2


def test_version(capsys):
    assert run(["--version"]) == 0
    captured = capsys.readouterr()
    assert "bifdr 0.1.0" in captured.out
    assert "schema 1" in captured.out


def test_simulate_deterministic_csv(tmp_path):
    out1, out2 = tmp_path / "s1.csv", tmp_path / "s2.csv"
    args = ["simulate", "--experiment", "1", "--alpha-a", "5", "--alpha-b", "5",
            "--n", "80", "--p", "4", "--reps", "2", "--seed", "7"]
    assert run(args + ["--out", out1]) == 0
    assert run(args + ["--out", out2, "--threads", "2"]) == 0
    assert out1.read_bytes() == out2.read_bytes()
    rows = out1.read_text().splitlines()
    assert rows[0].startswith("experiment,alpha_a")
    assert len(rows) == 5  # header + dr + three naive baselines


def test_simulate_exp5_default_p(tmp_path):
    out = tmp_path / "s.csv"
    # guardrail math only; run nothing heavy by exceeding the bound
    code = run(["simulate", "--experiment", "5", "--n", "100000000",
                "--reps", "100", "--out", out])
    assert code == 2  # resource bound refuses; p defaulted to 100 in message


def test_simulate_resource_guardrail(tmp_path, capsys):
    out = tmp_path / "s.csv"
    code = run(["simulate", "--experiment", "1", "--n", "1000000",
                "--p", "1000", "--reps", "1000", "--out", out])
    assert code == 2
    assert "guardrail" in capsys.readouterr().err


def test_simulate_bad_experiment(tmp_path):
    assert run(["simulate", "--experiment", "9", "--reps", "1",
                "--out", tmp_path / "s.csv"]) == 2


def test_env_seed_fallback(tmp_path, csv_data, monkeypatch):
    monkeypatch.setenv("BIFDR_SEED", "123")
    out = tmp_path / "e.json"
    assert run(["estimate", "--data", csv_data, "--functional",
                "expected_product", "--lambda", "0.05", "--out", out]) == 0
    assert json.loads(out.read_text())["seed"] == 123

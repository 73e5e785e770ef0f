import json
import math

import numpy as np
import pytest

from condrand.cli import main


def _write_toy_csv(path, rows=None):
    # Eight units, one dummy covariate, hand-checkable arithmetic.
    default = [
        "outcome,treated,x1",
        "3.0,1,1",
        "5.0,1,1",
        "4.0,1,0",
        "6.0,1,0",
        "1.0,0,1",
        "3.0,0,1",
        "2.0,0,0",
        "2.0,0,0",
    ]
    path.write_text("\n".join(rows or default) + "\n")


def test_analyze_toy_dataset_hand_arithmetic(tmp_path, capsys):
    input_path = tmp_path / "toy.csv"
    _write_toy_csv(input_path)
    out_prefix = tmp_path / "report"
    code = main(["analyze", str(input_path), "--out", str(out_prefix)])
    assert code == 0
    report = json.loads((tmp_path / "report.json").read_text())
    # Treated mean 4.5, control mean 2.0.
    dm = next(e for e in report["estimates"] if e["estimator"] == "DM")
    assert dm["estimate"] == pytest.approx(2.5)
    # The dummy covariate is split evenly, so the imbalance vanishes and
    # adjustment changes nothing.
    assert report["balance"]["delta"][0] == pytest.approx(0.0, abs=1e-12)
    assert report["balance"]["mahalanobis"] == pytest.approx(0.0, abs=1e-12)
    ols = next(e for e in report["estimates"] if e["estimator"] == "OLS_Z")
    assert ols["estimate"] == pytest.approx(2.5, abs=1e-10)
    assert (tmp_path / "report.txt").exists()
    assert "estimates" in capsys.readouterr().out


def test_analyze_pca_equals_ols_when_all_selected(tmp_path):
    rng = np.random.default_rng(0)
    n, k = 40, 2
    z = rng.standard_normal((n, k))
    w = np.zeros(n, dtype=int)
    w[rng.choice(n, n // 2, replace=False)] = 1
    y = z @ np.ones(k) + w + rng.standard_normal(n)
    lines = ["outcome,treated,a,b"]
    for i in range(n):
        lines.append(f"{float(y[i])!r},{w[i]},{float(z[i, 0])!r},{float(z[i, 1])!r}")
    input_path = tmp_path / "data.csv"
    input_path.write_text("\n".join(lines) + "\n")
    code = main(["analyze", str(input_path), "--out", str(tmp_path / "rep")])
    assert code == 0
    report = json.loads((tmp_path / "rep.json").read_text())
    assert report["component_selection"]["selected_p"] == k
    ols = next(e for e in report["estimates"] if e["estimator"] == "OLS_Z")
    pca = next(e for e in report["estimates"] if e["estimator"] == "PCA_P")
    assert pca["estimate"] == pytest.approx(ols["estimate"], abs=1e-10)


def test_analyze_pca_falls_back_to_dm_when_nothing_selected(tmp_path):
    input_path = tmp_path / "toy.csv"
    _write_toy_csv(input_path)
    # A tiny threshold with a large floor leaves no components standing.
    code = main(
        ["analyze", str(input_path), "--delta-bar", "1e-12", "--h", "1000000",
         "--out", str(tmp_path / "rep")]
    )
    assert code == 0
    report = json.loads((tmp_path / "rep.json").read_text())
    assert report["component_selection"]["selected_p"] == 0
    dm = next(e for e in report["estimates"] if e["estimator"] == "DM")
    pca = next(e for e in report["estimates"] if e["estimator"] == "PCA_P")
    assert pca["estimate"] == pytest.approx(dm["estimate"])
    assert pca["std_error"] == pytest.approx(dm["std_error"])


def test_analyze_missing_value_exit_two(tmp_path, capsys):
    input_path = tmp_path / "bad.csv"
    _write_toy_csv(
        input_path,
        rows=[
            "outcome,treated,x1",
            "3.0,1,1",
            "5.0,1,",
            "4.0,1,0",
            "6.0,1,0",
            "1.0,0,1",
            "3.0,0,1",
            "2.0,0,0",
            "2.0,0,0",
        ],
    )
    code = main(["analyze", str(input_path), "--out", str(tmp_path / "r")])
    assert code == 2
    err = capsys.readouterr().err
    assert "line 3" in err and "column 3" in err and "missing" in err


def test_analyze_non_binary_treated_exit_two(tmp_path, capsys):
    input_path = tmp_path / "bad.csv"
    _write_toy_csv(
        input_path,
        rows=["outcome,treated,x1", "1,2,0", "2,0,1", "3,1,0", "4,0,1"],
    )
    assert main(["analyze", str(input_path), "--out", str(tmp_path / "r")]) == 2
    assert "treated" in capsys.readouterr().err


def test_analyze_fisher_report(tmp_path):
    input_path = tmp_path / "toy.csv"
    _write_toy_csv(input_path)
    code = main(
        ["analyze", str(input_path), "--fisher", "--seed", "3",
         "--out", str(tmp_path / "rep")]
    )
    assert code == 0
    report = json.loads((tmp_path / "rep.json").read_text())
    fisher = report["fisher"]
    assert fisher["p_value"] == pytest.approx(fisher["rank"] / fisher["set_size"])


def _grid_config(tmp_path, **overrides):
    config = {
        "kind": "grid",
        "n": 16,
        "n1": 8,
        "k_grid": [2],
        "replications": 4,
        "assignments_per_sample": 100,
        "seed": 11,
        "estimators": ["DM", "OLS_Z"],
    }
    config.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config))
    return path


def test_simulate_same_seed_byte_identical(tmp_path):
    config_path = _grid_config(tmp_path)
    out1, out2 = tmp_path / "run1", tmp_path / "run2"
    assert main(["simulate", str(config_path), "--out", str(out1), "--threads", "1"]) == 0
    assert main(["simulate", str(config_path), "--out", str(out2), "--threads", "2"]) == 0
    assert (out1 / "records.csv").read_bytes() == (out2 / "records.csv").read_bytes()
    m1 = json.loads((out1 / "manifest.json").read_text())
    m2 = json.loads((out2 / "manifest.json").read_text())
    assert m1 == m2


def test_simulate_unknown_key_exit_two(tmp_path, capsys):
    config_path = _grid_config(tmp_path)
    data = json.loads(config_path.read_text())
    data["mystery_knob"] = True
    config_path.write_text(json.dumps(data))
    assert main(["simulate", str(config_path), "--out", str(tmp_path / "o")]) == 2
    assert "mystery_knob" in capsys.readouterr().err


def test_simulate_infeasible_config_exit_two(tmp_path, capsys):
    config_path = _grid_config(tmp_path, n1=16)
    assert main(["simulate", str(config_path), "--out", str(tmp_path / "o")]) == 2
    assert "n1" in capsys.readouterr().err


def test_simulate_desk_scale_caps_replications(tmp_path):
    config_path = _grid_config(tmp_path, replications=5_000, assignments_per_sample=50_000)
    out = tmp_path / "desk"
    assert main(["simulate", str(config_path), "--out", str(out), "--threads", "4"]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["replications"] == 200
    assert manifest["config"]["assignments_per_sample"] == 2_000


def test_simulate_enumeration_guard_exit_three(tmp_path, capsys):
    config_path = _grid_config(
        tmp_path, n=40, n1=20, assignments_per_sample="ALL", replications=1
    )
    assert main(["simulate", str(config_path), "--out", str(tmp_path / "o")]) == 3
    assert "refused" in capsys.readouterr().err


def test_illustration_config_round_trip(tmp_path):
    config = {
        "kind": "illustration",
        "n": 12,
        "n1": 6,
        "k_grid": [1],
        "replications": 3,
        "assignments_per_sample": "ALL",
        "seed": 5,
        "bins": 10,
        "estimators": ["DM", "OLS_Z"],
    }
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(config))
    out = tmp_path / "out"
    assert main(["simulate", str(config_path), "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["kind"] == "illustration"
    assert len(manifest["bins"]["DM"]["size"]) == 10
    lines = (out / "records.csv").read_text().splitlines()
    assert len(lines) == 1 + 3 * math.comb(12, 6) * 2

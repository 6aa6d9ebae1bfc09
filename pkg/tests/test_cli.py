import csv
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from pareto_lowrank import cli, sensitivity
from pareto_lowrank.spectrum import normalized_curve, profile
from pareto_lowrank.synthetic import matrix_with_spectrum
from pareto_lowrank.tensorio import (
    CalibrationRecord,
    WeightTensor,
    covariance_from_activations,
    read_container,
    write_calibration,
    write_container,
)


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    assert cli.main(["gen-synthetic", "--out", str(root), "--seed", "5", "--rows", "16", "--cols", "12",
                     "--groups", "attn,mlp"]) == 0
    return root


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _args(synth, *extra):
    return ["--model", str(synth / "model"), "--calib", str(synth / "calib"), *extra]


def test_profile_single_layer_and_degenerate(tmp_path):
    rng = np.random.default_rng(0)
    write_container([WeightTensor("w", rng.standard_normal((5, 3))), WeightTensor("z", np.zeros((4, 4)))],
                    tmp_path / "m")
    assert cli.main(["profile", "--model", str(tmp_path / "m"), "--out", str(tmp_path / "o")]) == 0
    rows = _rows(tmp_path / "o" / "profiles.csv")
    assert [int(r["r"]) for r in rows if r["layer"] == "w"] == [0, 1, 2, 3]
    summary = json.loads((tmp_path / "o" / "profile_summary.json").read_text())
    flags = {l["name"]: l["degenerate"] for l in summary["layers"]}
    assert flags == {"w": False, "z": True}


def test_profile_envelope_contains_retained_layers(synth, tmp_path):
    out = tmp_path / "p"
    assert cli.main(["profile", "--model", str(synth / "model"), "--out", str(out)]) == 0
    env_rows = _rows(out / "envelope.csv")
    grid = np.array([float(r["eps"]) for r in env_rows])
    lower = np.array([float(r["lower"]) for r in env_rows])
    upper = np.array([float(r["upper"]) for r in env_rows])
    retained = set(json.loads((out / "profile_summary.json").read_text())["envelope"]["retained"])
    assert len(retained) == 12
    for t in read_container(synth / "model"):
        if t.name in retained:
            c = normalized_curve(profile(t), grid)
            assert np.all(lower <= c) and np.all(c <= upper)


def test_compress_eps_one_zero_model(synth, tmp_path):
    assert cli.main(["compress", *_args(synth, "--eps", "1", "--out", str(tmp_path))]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["totals"]["compression_ratio"] == 1.0
    assert all(r["rank"] == 0 for r in report["per_layer"])
    assert read_container(tmp_path / "factors") == []


def test_compress_svd_objectives_are_tail_energies(synth, tmp_path):
    assert cli.main(["compress", "--model", str(synth / "model"), "--method", "svd", "--eps", "0.3",
                     "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    weights = {t.name: t.matrix for t in read_container(synth / "model")}
    for row in report["per_layer"]:
        s = np.linalg.svd(weights[row["name"]], compute_uv=False)
        assert row["objective_final"] == pytest.approx(np.sum(s[row["rank"]:] ** 2), rel=1e-9)


def test_compress_report_totals_and_factors(synth, tmp_path):
    assert cli.main(["compress", *_args(synth, "--eps", "0.4", "--tau", "3", "--out", str(tmp_path))]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    rows = report["per_layer"]
    assert report["totals"]["total_params"] == sum(r["params"] for r in rows)
    assert report["totals"]["dense_params"] == 12 * 16 * 12
    assert {r["group"] for r in rows} == {"attn", "mlp"}
    factors = {t.name: t.matrix for t in read_container(tmp_path / "factors")}
    for r in rows:
        if r["rank"]:
            assert factors[r["name"] + ".A"].shape == (16, r["rank"])
            assert factors[r["name"] + ".B"].shape == (r["rank"], 12)
            assert r["objective_final"] <= r["objective_init"]
    assert len(_rows(tmp_path / "traces.csv")) == 4 * len(rows)


def test_compress_target_ratio_meets_budget(synth, tmp_path):
    assert cli.main(["compress", *_args(synth, "--target-ratio", "0.4", "--tau", "1", "--out", str(tmp_path))]) == 0
    totals = json.loads((tmp_path / "report.json").read_text())["totals"]
    assert totals["total_params"] <= math.floor(0.6 * totals["dense_params"])


def test_compress_group_tolerances(synth, tmp_path):
    args = _args(synth, "--eps-group", "attn=1", "--eps-group", "mlp=0", "--tau", "1", "--out", str(tmp_path))
    assert cli.main(["compress", *args]) == 0
    for row in json.loads((tmp_path / "report.json").read_text())["per_layer"]:
        assert (row["rank"] == 0) == (row["group"] == "attn")


def test_compress_is_deterministic(synth, tmp_path):
    outs = []
    for i, jobs in enumerate(["1", "1", "4"]):
        out = tmp_path / str(i)
        assert cli.main(["compress", *_args(synth, "--eps", "0.3", "--jobs", jobs, "--out", str(out))]) == 0
        outs.append(out)
    for name in ["report.json", "traces.csv", "factors/manifest.json", "factors/data.bin"]:
        blobs = {(o / name).read_bytes() for o in outs}
        assert len(blobs) == 1, name


@pytest.mark.parametrize(
    "extra",
    [
        [],  # no tolerance
        ["--eps", "0.3", "--target-ratio", "0.2"],
        ["--eps", "1.5"],
        ["--eps-group", "attn=0.3"],  # mlp group has no tolerance
        ["--eps", "0.3", "--method", "als", "--calib", "/nonexistent"],
    ],
)
def test_config_errors_exit_2(synth, tmp_path, extra):
    args = ["compress", "--model", str(synth / "model"), "--out", str(tmp_path)]
    if "--calib" not in extra:
        args += ["--calib", str(synth / "calib")]
    assert cli.main(args + extra) == 2


def test_missing_calibration_exit_2(synth, tmp_path):
    assert cli.main(["compress", "--model", str(synth / "model"), "--eps", "0.3", "--out", str(tmp_path)]) == 2


def test_config_file_and_flag_override(synth, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model": str(synth / "model"), "method": "svd", "eps": 0.9}))
    out = tmp_path / "o"
    assert cli.main(["compress", "--config", str(cfg), "--eps", "0.2", "--out", str(out)]) == 0
    echo = json.loads((out / "report.json").read_text())["config"]
    assert echo["eps"] == 0.2 and echo["method"] == "svd"
    cfg.write_text(json.dumps({"model": str(synth / "model"), "epsilon": 0.2}))
    assert cli.main(["compress", "--config", str(cfg), "--out", str(out)]) == 2


def test_whitened_rank_deficient_exit_3(tmp_path):
    rng = np.random.default_rng(1)
    W = matrix_with_spectrum(rng, 6, 8, np.linspace(2, 1, 6))
    write_container([WeightTensor("w", W)], tmp_path / "m")
    write_calibration([CalibrationRecord("w", covariance=covariance_from_activations(rng.standard_normal((8, 3))))],
                      tmp_path / "c")
    base = ["compress", "--model", str(tmp_path / "m"), "--calib", str(tmp_path / "c"), "--eps", "0.2"]
    assert cli.main(base + ["--method", "whitened", "--out", str(tmp_path / "o1")]) == 3
    assert cli.main(base + ["--method", "als", "--out", str(tmp_path / "o2")]) == 0


def test_sweep_rows(synth, tmp_path):
    model = str(synth / "model")
    assert cli.main(["sweep", "--model", model, "--grid", "0,1", "--out", str(tmp_path / "a")]) == 0
    assert len(_rows(tmp_path / "a" / "frontier.csv")) == 2
    assert cli.main(["sweep", "--model", model, "--grid", "0.5,0.5,0.5", "--out", str(tmp_path / "b")]) == 0
    assert len(_rows(tmp_path / "b" / "frontier.csv")) == 1
    assert cli.main(["sweep", "--model", model, "--out", str(tmp_path / "c")]) == 0
    rows = [(int(r["total_params"]), float(r["surrogate_loss"])) for r in _rows(tmp_path / "c" / "frontier.csv")]
    assert 2 <= len(rows) <= 33
    assert [p for p, _ in rows] == sorted(p for p, _ in rows)
    assert not any(p2 < p1 and l2 < l1 for p1, l1 in rows for p2, l2 in rows)


def _verify(tmp_path, toy):
    cfg = tmp_path / "toy.json"
    cfg.write_text(json.dumps({"toy": toy}))
    code = cli.main(["verify-bound", "--config", str(cfg), "--out", str(tmp_path)])
    path = tmp_path / "bound.json"
    return code, json.loads(path.read_text()) if code != 2 else None


def test_verify_bound_cases(tmp_path, capsys):
    code, rows = _verify(tmp_path, {"perturbation": "zero"})
    assert code == 0 and all(r["bound"] == 0 and r["delta_L"] == 0 and r["pass"] for r in rows)
    code, rows = _verify(tmp_path, {"perturbation": "aligned"})
    assert code == 0 and all(abs(r["ratio"] - 1) <= 1e-9 for r in rows)
    capsys.readouterr()
    code, rows = _verify(tmp_path, {"perturbation": "random", "scales": [1e-4]})
    assert code == 0 and rows[0]["ratio"] <= 1.005
    assert json.loads(capsys.readouterr().out) == rows


def test_verify_bound_failure_exit_4(tmp_path, monkeypatch):
    monkeypatch.setattr(sensitivity, "bound_tolerance", lambda t: 0.0)
    assert _verify(tmp_path, {})[0] == 4


def test_verify_bound_bad_spec_exit_2(tmp_path):
    assert _verify(tmp_path, {"depth": 3})[0] == 2
    assert _verify(tmp_path, {"activation": "relu"})[0] == 2


def test_allocate_report(synth, tmp_path):
    assert cli.main(["allocate", "--model", str(synth / "model"), "--eps", "0.3", "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "allocation.json").read_text())
    assert doc["epsilon"] == 0.3 and len(doc["per_layer"]) == 12
    assert doc["total_params"] == sum(r["params"] for r in doc["per_layer"])


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "pareto_lowrank", "compress", "--out", str(tmp_path)],
                         capture_output=True, text=True)
    assert res.returncode == 2
    assert "exactly one of" in res.stderr or "--model" in res.stderr

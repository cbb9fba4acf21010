import csv
import json
import subprocess
import sys

import pytest

import latentps.cli as cli
import latentps.simulation as sim
from latentps.cli import EXIT_COMPUTE, EXIT_CONFIG, EXIT_DATA, EXIT_OK, main
from latentps.gibbs import SamplerError
from latentps.simulation import ESTIMAND_NAMES, ReplicationFit

FAST = ["--chains", "2", "--iters", "160", "--burnin", "80", "--thin", "2"]


@pytest.fixture(scope="module")
def trial(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--case", "1", "--seed", "4", "--out", str(out)]) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def analysis(trial, tmp_path_factory):
    out = tmp_path_factory.mktemp("fit")
    args = ["analyze", "--clusters", str(trial / "clusters.csv"), "--individuals", str(trial / "individuals.csv"), "--seed", "9", "--out", str(out)]
    assert main(args + FAST) == EXIT_OK
    return out, args


def test_simulate_writes_truth(trial):
    names = {p.name for p in trial.iterdir()}
    assert {"clusters.csv", "individuals.csv", "truth.json", "truth_clusters.csv", "truth_individuals.csv", "manifest.json"} <= names
    manifest = json.loads((trial / "manifest.json").read_text())
    assert manifest["subcommand"] == "simulate" and manifest["seed"] == 4


def test_analyze_outputs(analysis):
    out, _ = analysis
    for name in ("report.csv", "report.txt", "rhat.csv", "label_switching.csv", "pppv.csv", "manifest.json"):
        assert (out / name).is_file(), name
    with open(out / "report.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    populations = {r["population"] for r in rows}
    assert populations == {"super-population", "finite-sample"}
    assert "ITT_1-ITT_2" in {r["estimand"] for r in rows}
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["chain"]["n_chains"] == 2
    assert len(manifest["config_hash"]) == 64
    assert set(manifest["inputs"]) == {"clusters", "individuals"}
    with open(out / "rhat.csv", newline="") as fh:
        rhat = list(csv.DictReader(fh))
    assert any("CACE (super-population)" in r.values() for r in rhat)


def test_analyze_is_deterministic(analysis, tmp_path):
    out, args = analysis
    again = tmp_path / "again"
    args = [a if a != str(out) else str(again) for a in args]
    assert main(args + FAST) == EXIT_OK
    for name in ("report.csv", "rhat.csv", "pppv.csv", "manifest.json"):
        assert (again / name).read_bytes() == (out / name).read_bytes(), name


def test_parallel_chains_match_serial(analysis, tmp_path):
    out, args = analysis
    par = tmp_path / "par"
    args = [a if a != str(out) else str(par) for a in args]
    assert main(args + FAST + ["--jobs", "2"]) == EXIT_OK
    assert (par / "report.csv").read_bytes() == (out / "report.csv").read_bytes()


def test_diagnose_reproduces_analyze(analysis, tmp_path):
    out, _ = analysis
    assert main(["diagnose", "--draws", str(out), "--out", str(tmp_path)]) == EXIT_OK
    for name in ("rhat.csv", "pppv.csv", "label_switching.csv"):
        assert (tmp_path / name).read_bytes() == (out / name).read_bytes(), name


def test_bad_config_exits_two(trial, tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("chain:\n  n_iterations: 10\n  burn_in: 50\n")
    code = main(["analyze", "--clusters", str(trial / "clusters.csv"), "--individuals", str(trial / "individuals.csv"), "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert code == EXIT_CONFIG
    cfg.write_text("colour: blue\n")
    assert main(["analyze", "--clusters", "x", "--individuals", "y", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert main(["diagnose", "--draws", str(tmp_path / "nowhere")]) == EXIT_CONFIG


def test_bad_data_exits_three(trial, tmp_path):
    bad = tmp_path / "clusters.csv"
    lines = (trial / "clusters.csv").read_text().splitlines()
    header = lines[0].split(",")
    row = lines[1].split(",")
    row[header.index("W")] = "2"
    bad.write_text("\n".join([lines[0], ",".join(row)] + lines[2:]) + "\n")
    code = main(["analyze", "--clusters", str(bad), "--individuals", str(trial / "individuals.csv"), "--out", str(tmp_path / "o")] + FAST)
    assert code == EXIT_DATA
    assert main(["analyze", "--clusters", str(tmp_path / "missing.csv"), "--individuals", "y", "--out", str(tmp_path / "o")]) == EXIT_DATA


def test_sampler_failure_exits_four(trial, tmp_path, monkeypatch):
    def broken(*args, **kwargs):
        raise SamplerError("non-finite strata weights at iteration 3")

    monkeypatch.setattr(cli, "run_chain", broken)
    code = main(["analyze", "--clusters", str(trial / "clusters.csv"), "--individuals", str(trial / "individuals.csv"), "--out", str(tmp_path / "o")] + FAST)
    assert code == EXIT_COMPUTE


def test_replicate_writes_operating_characteristics(tmp_path, monkeypatch):
    monkeypatch.setattr(sim, "fit_replicate", lambda case, rep, seed, settings: ReplicationFit(rep, 0, 0, {n: 0.0 for n in ESTIMAND_NAMES}, {n: (-1.0, 1.0) for n in ESTIMAND_NAMES}))
    monkeypatch.setattr(sim, "true_estimands", lambda case_id: ({n: 0.5 for n in ESTIMAND_NAMES}, {}))
    assert main(["replicate", "--case", "1", "--reps", "3", "--out", str(tmp_path)]) == EXIT_OK
    lines = (tmp_path / "operating_characteristics.csv").read_text().splitlines()
    assert lines[1] == "ITT,0.5,100,-0.5,2,0.5,3,0"


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "latentps", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("latentps ")

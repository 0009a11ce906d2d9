import csv
import json

import numpy as np
import pytest

from causalsim import cli
from oracles import rank_r_instance


def run(*argv):
    return cli.main([str(a) for a in argv])


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return path


TINY = {"hyper": {"num_train_it": 20, "num_disc_it": 1, "batch_size": 64, "hidden": [8], "encoder_hidden": [4],
                  "disc_hidden": [8]}}


@pytest.fixture(scope="module")
def abr_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("abr")
    cfg = write_json(root / "gen.json", {"n_trajectories": 45, "horizon": 20})
    assert run("gen-abr", "--config", cfg, "--seed", 4, "--out", root / "gen") == 0
    tcfg = write_json(root / "train.json", TINY)
    data = root / "gen" / "dataset"
    assert run("train", "--config", tcfg, "--data", data, "--exclude", "bba", "--out", root / "cs") == 0
    assert run("train", "--config", tcfg, "--data", data, "--exclude", "bba", "--model", "slsim",
               "--out", root / "sl") == 0
    return root


def test_gen_writes_dataset_and_manifest(abr_run):
    man = json.loads((abr_run / "gen" / "run_manifest.json").read_text())
    assert man["seed"] == 4 and man["command"] == "gen-abr"
    header = (abr_run / "gen" / "dataset" / "steps.csv").read_text().splitlines()[0]
    assert header.startswith("traj_id,t,policy_id")


def test_gen_is_reproducible(abr_run, tmp_path):
    cfg = abr_run / "gen.json"
    assert run("gen-abr", "--config", cfg, "--seed", 4, "--out", tmp_path) == 0
    a = json.loads((abr_run / "gen" / "run_manifest.json").read_text())["result"]["dataset"]
    b = json.loads((tmp_path / "run_manifest.json").read_text())["result"]["dataset"]
    assert a == b


def test_train_outputs(abr_run):
    assert (abr_run / "cs" / "model.json").exists()
    rows = list(csv.DictReader(open(abr_run / "cs" / "loss_history.csv")))
    assert len(rows) == 20 and "l_disc" in rows[0]


def test_simulate_and_eval(abr_run):
    data = abr_run / "gen" / "dataset"
    out = abr_run / "sim"
    assert run("simulate", "--data", data, "--model", abr_run / "cs" / "model.json", "--target", "bba",
               "--out", out) == 0
    prov = json.loads((out / "provenance.json").read_text())
    assert prov["simulator"] == "causalsim" and prov["model_saw_target"] is False
    ecfg = write_json(abr_run / "eval.json", {"models": {"bba": {"causalsim": str(abr_run / "cs" / "model.json"),
                                                                 "slsim": str(abr_run / "sl" / "model.json")}}})
    assert run("eval", "--config", ecfg, "--data", data, "--out", abr_run / "eval") == 0
    rows = list(csv.DictReader(open(abr_run / "eval" / "eval_rows.csv")))
    assert {r["simulator"] for r in rows} == {"causalsim", "expertsim", "slsim"}


def test_sweep_and_report(abr_run):
    data = abr_run / "gen" / "dataset"
    scfg = write_json(abr_run / "sweep.json", {"grid": [{"reservoir": 2.0, "cushion": 4.0},
                                                        {"reservoir": 5.0, "cushion": 5.0}]})
    assert run("sweep", "--config", scfg, "--data", data, "--simulator", "expertsim", "--out", abr_run / "sw") == 0
    pts = list(csv.DictReader(open(abr_run / "sw" / "sweep_points.csv")))
    assert len(pts) == 2
    if not (abr_run / "eval").exists():
        test_simulate_and_eval(abr_run)
    assert run("report", abr_run / "eval", abr_run / "sw", "--out", abr_run / "rep") == 0
    figs = json.loads((abr_run / "rep" / "run_manifest.json").read_text())["result"]["figures"]
    assert figs and all(p.endswith(".png") for p in figs)
    assert (abr_run / "rep" / "report_tidy.csv").exists()


def test_expertsim_on_lb_is_config_error(tmp_path):
    cfg = write_json(tmp_path / "g.json", {"n_trajectories": 20, "horizon": 10})
    assert run("gen-lb", "--config", cfg, "--out", tmp_path / "g") == 0
    code = run("simulate", "--data", tmp_path / "g" / "dataset", "--target", "oracle", "--simulator", "expertsim",
               "--out", tmp_path / "s")
    assert code == 2


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run("gen-abr", "--config", bad, "--out", tmp_path / "o") == 2
    assert run("train", "--data", tmp_path / "missing", "--out", tmp_path / "o") == 2
    assert run("report", "--out", tmp_path / "o") == 2


def write_tensor(tmp_path, full, acts, pols):
    t = tmp_path / "tensor.csv"
    p = tmp_path / "partition.csv"
    with open(t, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["alpha", "beta", "gamma", "value"])
        for beta, a in enumerate(acts):
            for g in range(full.shape[2]):
                w.writerow([a, beta, g, repr(float(full[a, beta, g]))])
    with open(p, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["beta", "policy"])
        for beta, pol in enumerate(pols):
            w.writerow([beta, pol])
    return t, p


def test_complete_recovers_tensor(tmp_path):
    full, acts, pols = rank_r_instance(n_per_policy=100)
    t, p = write_tensor(tmp_path, full, acts, pols)
    assert run("complete", "--tensor", t, "--partition", p, "--rank", 2, "--out", tmp_path / "c") == 0
    got = np.zeros_like(full)
    for r in csv.DictReader(open(tmp_path / "c" / "completed.csv")):
        got[int(r["alpha"]), int(r["beta"]), int(r["gamma"])] = float(r["value"])
    assert np.max(np.abs(got - full) / np.abs(full)) < 1e-6
    assert json.loads((tmp_path / "c" / "assumptions.json").read_text())["passed"]


def test_complete_assumption_failure_exit_code(tmp_path):
    full, acts, pols = rank_r_instance(n_policies=5, n_per_policy=100)
    t, p = write_tensor(tmp_path, full, acts, pols)
    assert run("complete", "--tensor", t, "--partition", p, "--rank", 2, "--out", tmp_path / "c") == 3
    man = json.loads((tmp_path / "c" / "run_manifest.json").read_text())
    assert "assumption_failure" in man

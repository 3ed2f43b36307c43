import json
import logging

import numpy as np
import pytest

from marginfer.cli import REPORT_SCHEMA, compare_pair, global_flags, main, pair_flags, parse_pairs
from marginfer.errors import ConfigError
from marginfer.moment_net import load_hierarchy
from marginfer.sim_models import read_batch


def write_config(path, **fields):
    base = {
        "model": {"kind": "linear_gaussian", "dim_theta": 4},
        "n_sims": 2000,
        "n_test": 200,
        "pairs": [[0, 1]],
        "moments": {"hidden": [16], "max_epochs": 4, "batch_size": 128},
        "flow": {"hidden": [8], "n_members": 2, "n_layers": 2, "max_epochs": 3, "batch_size": 128},
        "mcmc": {"steps": 3000},
        "crossval": {"n_obs": 3, "flow_samples": 2000, "kl_samples": 1000},
    }
    for k, v in fields.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            base[k] = {**base[k], **v}
        else:
            base[k] = v
    path.write_text(json.dumps(base))
    return str(path)


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def cfg(tmp_path):
    return write_config(tmp_path / "cfg.json"), tmp_path / "run"


def test_simulate_writes_matching_header(cfg, capsys):
    path, out = cfg
    assert run("simulate", "--config", path, "--out", out) == 0
    printed = capsys.readouterr().out
    assert "resolved config" in printed
    batch = read_batch(out / "train.bin")
    assert (batch.n_sims, batch.dim_theta, batch.dim_x, batch.seed) == (2000, 4, 4, 0)
    assert f"sha256={batch.fingerprint()}" in printed
    assert read_batch(out / "test.bin").n_sims == 200


def test_simulate_is_deterministic(tmp_path):
    path = write_config(tmp_path / "c.json")
    run("simulate", "--config", path, "--out", tmp_path / "a", "--seed", 5)
    run("simulate", "--config", path, "--out", tmp_path / "b", "--seed", 5)
    assert (tmp_path / "a" / "train.bin").read_bytes() == (tmp_path / "b" / "train.bin").read_bytes()


def test_simulate_empty_dataset_warns(tmp_path, caplog):
    path = write_config(tmp_path / "c.json", n_sims=0, n_test=0)
    with caplog.at_level(logging.WARNING, logger="marginfer"):
        assert run("simulate", "--config", path, "--out", tmp_path / "r") == 0
    assert "n_sims = 0" in caplog.text
    assert read_batch(tmp_path / "r" / "train.bin").n_sims == 0


def test_config_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"n_sims": 10,\n "seed": }')
    assert run("simulate", "--config", bad) == 2
    assert "line 2" in capsys.readouterr().err
    assert run("simulate", "--config", write_config(tmp_path / "u.json", n_simz=3)) == 2
    assert run("simulate", "--config", tmp_path / "missing.json") == 2
    assert run("simulate", "--config", write_config(tmp_path / "m.json", model={"kind": "spiral"})) == 2


def test_train_rejects_bad_pairs_before_training(cfg, capsys):
    path, out = cfg
    run("simulate", "--config", path, "--out", out)
    assert run("train", "--method", "flow", "--config", path, "--out", out, "--pairs", "1,1") == 2
    assert run("train", "--method", "moments", "--config", path, "--out", out, "--pairs", "0,7") == 2
    assert run("train", "--method", "moments", "--config", path, "--out", out, "--pairs", "x") == 2
    assert not (out / "moments" / "manifest.json").exists()


def test_train_dimension_mismatch(tmp_path):
    small = write_config(tmp_path / "a.json")
    big = write_config(tmp_path / "b.json", model={"kind": "linear_gaussian", "dim_theta": 5})
    run("simulate", "--config", small, "--out", tmp_path / "r")
    assert run("train", "--method", "moments", "--config", big, "--out", tmp_path / "r") == 2


def test_train_without_dataset(cfg):
    path, out = cfg
    assert run("train", "--method", "moments", "--config", path, "--out", out) == 2


def _bytes(d):
    return {p.name: p.read_bytes() for p in sorted(d.glob("*.ckpt"))}


@pytest.mark.parametrize("method,folds", [("moments", 1), ("moments", 3), ("flow", 1)])
def test_resume_matches_uninterrupted(tmp_path, method, folds):
    section = {"max_epochs": 5, "patience": 100, "residual_folds": folds}
    full = write_config(tmp_path / "full.json", moments=section, flow={"max_epochs": 5, "patience": 100})
    part = write_config(tmp_path / "part.json", moments={"max_epochs": 2, "patience": 100, "residual_folds": folds},
                        flow={"max_epochs": 2, "patience": 100})
    run("simulate", "--config", full, "--out", tmp_path / "a")
    run("simulate", "--config", full, "--out", tmp_path / "b")
    assert run("train", "--method", method, "--config", full, "--out", tmp_path / "a") == 0
    assert run("train", "--method", method, "--config", part, "--out", tmp_path / "b") == 0
    assert run("train", "--method", method, "--config", full, "--out", tmp_path / "b", "--resume") == 0
    sub = "moments" if method == "moments" else "flow/pair_0_1"
    a, b = _bytes(tmp_path / "a" / sub), _bytes(tmp_path / "b" / sub)
    assert a and a == b
    assert (tmp_path / "a" / sub / "loss_history.csv").read_text() == \
        (tmp_path / "b" / sub / "loss_history.csv").read_text()


def test_loss_history_csv(cfg):
    path, out = cfg
    run("simulate", "--config", path, "--out", out)
    run("train", "--method", "moments", "--config", path, "--out", out)
    lines = (out / "moments" / "loss_history.csv").read_text().splitlines()
    assert lines[0] == "head,epoch,train_loss,val_loss"
    assert {ln.split(",")[0] for ln in lines[1:]} == {"mean", "var", "cov_joint"}


def test_corner_all_pairs_d16(tmp_path):
    path = write_config(tmp_path / "c.json", model={"kind": "linear_gaussian", "dim_theta": 16},
                        n_sims=500, n_test=5, pairs="all", moments={"max_epochs": 1})
    out = tmp_path / "r"
    run("simulate", "--config", path, "--out", out)
    assert run("train", "--method", "moments", "--config", path, "--out", out) == 0
    assert run("corner", "--config", path, "--out", out) == 0
    files = sorted(p.name for p in (out / "corner").iterdir())
    assert sum(f.startswith("pair_") for f in files) == 120
    assert sum(f.startswith("diag_") for f in files) == 16
    for f in files:
        if f.endswith("_moments.json"):
            cov = np.array(json.loads((out / "corner" / f).read_text())["cov"])
            assert np.linalg.eigvalsh(cov).min() > 0
    report = json.loads((out / "corner" / "corner.json").read_text())
    assert all(report["moment_cov_spd"].values())


def test_corner_with_flow_and_errors(cfg, capsys):
    path, out = cfg
    run("simulate", "--config", path, "--out", out)
    assert run("corner", "--config", path, "--out", out) == 2
    run("train", "--method", "flow", "--config", path, "--out", out)
    assert run("corner", "--config", path, "--out", out, "--resolution", 0) == 2
    assert run("corner", "--config", path, "--out", out, "--pairs", "2,3") == 2
    assert "flows for pairs [(0, 1)]" in capsys.readouterr().err
    assert run("corner", "--config", path, "--out", out, "--resolution", 20) == 0
    rows = (out / "corner" / "pair_0_1_flow.csv").read_text().splitlines()
    assert rows[0] == "alpha,beta,density" and len(rows) == 401
    diag = json.loads((out / "corner" / "diag_0.json").read_text())
    assert len(diag["flow_marginal"]["density"]) == 20


def test_all_pairs_gate(tmp_path):
    path = write_config(tmp_path / "c.json", model={"kind": "linear_gaussian", "dim_theta": 17},
                        n_sims=100, n_test=0, pairs="all", moments={"max_epochs": 1})
    run("simulate", "--config", path, "--out", tmp_path / "r")
    assert run("train", "--method", "moments", "--config", path, "--out", tmp_path / "r") == 2


def test_identical_moments_pass_every_flag():
    cmp = compare_pair([1.0, 2.0], [0.3, -0.1], [1.0, 2.0], [0.3, -0.1], [1.0, 2.0])
    rec = {"xval_sigma_delta": cmp["sigma_delta"], "xval_mean_delta": cmp["mean_delta"], "kl": 0.0,
           "grid_mass": 1.0, "mn_cov_rel_error": 0.0, "cov_eligible": True}
    assert all(pair_flags(rec).values()) and len(pair_flags(rec)) == 5
    summary = {"mn_mean_rmse": [0.0, 0.0], "mn_sigma_rel_median": 0.0, "coverage": 0.683,
               "mcmc_mean_z": [0.0], "mcmc_cov_rel": 0.0}
    assert all(global_flags(summary).values()) and len(global_flags(summary)) == 5


def test_crossval_requires_estimator(cfg):
    path, out = cfg
    run("simulate", "--config", path, "--out", out)
    assert run("crossval", "--config", path, "--out", out) == 2


def test_undertrained_flow_fails_crossval(tmp_path, capsys):
    path = write_config(tmp_path / "c.json", flow={"max_epochs": 1, "learning_rate": 1e-5}, mcmc={"steps": 0})
    out = tmp_path / "r"
    run("simulate", "--config", path, "--out", out)
    run("train", "--method", "flow", "--config", path, "--out", out)
    assert run("crossval", "--config", path, "--out", out) == 3
    report = json.loads((out / "crossval" / "report.json").read_text())
    assert report["schema"] == REPORT_SCHEMA and report["version"] == 1
    assert report["passed"] is False and report["pairs"]["0,1"]["flags"]["kl"] is False
    assert run("report", "--out", out) == 0
    assert "FAIL" in capsys.readouterr().out


def test_full_small_pipeline_passes(tmp_path, capsys):
    path = write_config(tmp_path / "c.json", n_sims=4000, n_test=300, pairs="0,1;2,3",
                        moments={"hidden": [32, 32], "max_epochs": 30},
                        flow={"hidden": [16, 16], "max_epochs": 15, "n_layers": 3},
                        mcmc={"steps": 4000}, crossval={"n_obs": 5, "flow_samples": 4000, "kl_samples": 2000})
    out = tmp_path / "r"
    for cmd in (["simulate"], ["train", "--method", "moments"], ["train", "--method", "flow"], ["mcmc"]):
        assert run(*cmd, "--config", path, "--out", out) == 0
    assert run("crossval", "--config", path, "--out", out) == 0
    report = json.loads((out / "crossval" / "report.json").read_text())
    for key in ("coverage", "mn_mean_rmse", "mcmc_ess_min"):
        assert key in report["global"]
    assert set(report["pairs"]["0,1"]["flags"]) == {"kl", "grid_mass", "mn_cov", "xval_sigma", "xval_mean"}
    assert load_hierarchy(out / "moments").pairs == [(0, 1), (2, 3)]


def test_mcmc_command_errors(tmp_path):
    chirp = write_config(tmp_path / "c.json", model={"kind": "chirp"})
    assert run("mcmc", "--config", chirp, "--out", tmp_path / "r") == 2
    lin = write_config(tmp_path / "l.json")
    assert run("mcmc", "--config", lin, "--out", tmp_path / "r", "--mcmc-walkers", 7) == 2
    # far too short for ten autocorrelation times
    assert run("mcmc", "--config", lin, "--out", tmp_path / "r", "--mcmc-steps", 30) == 4


def test_mcmc_with_observation_file(tmp_path):
    lin = write_config(tmp_path / "l.json", n_test=0)
    obs = tmp_path / "x.txt"
    obs.write_text("0.5 -1.0 0.2 0.0\n")
    assert run("mcmc", "--config", lin, "--out", tmp_path / "r", "--obs", obs) == 0
    summary = json.loads((tmp_path / "r" / "mcmc" / "summary.json").read_text())
    assert summary["x_obs"] == [0.5, -1.0, 0.2, 0.0]
    assert summary["n_post"] >= 10_000 and len(summary["ess"]) == 4
    obs.write_text("[1, 2]")
    assert run("mcmc", "--config", lin, "--out", tmp_path / "r", "--obs", obs) == 2


def test_report_without_crossval(tmp_path):
    assert run("report", "--out", tmp_path) == 2


def test_log_level_from_environment(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("MARGINFER_LOG", "info")
    path = write_config(tmp_path / "c.json", n_sims=10, n_test=0)
    assert run("simulate", "--config", path, "--out", tmp_path / "r") == 0
    assert logging.getLogger("marginfer").getEffectiveLevel() == logging.INFO
    monkeypatch.delenv("MARGINFER_LOG")
    run("simulate", "--config", path, "--out", tmp_path / "r")
    assert logging.getLogger("marginfer").getEffectiveLevel() == logging.WARNING


def test_parse_pairs():
    assert parse_pairs("0,1; 2,3", 4) == [(0, 1), (2, 3)]
    assert parse_pairs([[3, 1]], 4) == [(1, 3)]
    assert len(parse_pairs("all", 16)) == 120
    with pytest.raises(ConfigError):
        parse_pairs("0,1;1,0", 4)

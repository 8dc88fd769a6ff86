"""End-to-end CLI: config validation, commands, exit codes, artifacts."""

import json
import os

import numpy as np
import pytest

from so3flow import cli, so3
from so3flow.cli import main


def write_cfg(path, **overrides):
    cfg = {
        "seed": 3,
        "out_dir": str(path.parent / "run"),
        "target": {"kind": "cone-cyclic", "kappa": 40.0},
        "model": {"blocks": 1, "components": 2},
        "train": {"steps": 25, "batch_size": 16, "dataset_size": 400,
                  "checkpoint_interval": 10},
        "grids": {"target": 100000, "audit": 100000, "viz": 4000},
    }
    for key, val in overrides.items():
        if isinstance(val, dict):
            cfg[key] = {**cfg[key], **val}
        else:
            cfg[key] = val
    path.write_text(json.dumps(cfg, indent=2) + "\n")
    return path


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def trained(workdir):
    """A short real training run; returns (config path, out dir)."""
    cfg = write_cfg(workdir / "cone.json")
    assert main(["train", "--config", str(cfg)]) == 0
    return cfg, workdir / "run"


@pytest.fixture(scope="module")
def identity_run(workdir):
    """A zero-step run: the checkpoint is the exact identity flow."""
    cfg = write_cfg(workdir / "id.json", out_dir=str(workdir / "id_run"),
                    train={"steps": 0, "batch_size": 16,
                           "dataset_size": 400, "checkpoint_interval": 10})
    assert main(["train", "--config", str(cfg)]) == 0
    return cfg, workdir / "id_run"


# ---------------------------------------------------------------------------
# config validation

def test_load_config_defaults(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{"target": {"kind": "peak"}}\n')
    cfg = cli.load_config(p)
    assert cfg["seed"] == 0
    assert cfg["target"]["kappa"] == 40.0
    assert cfg["model"]["blocks"] == 6 and cfg["model"]["components"] == 16
    assert cfg["grids"]["audit"] == 500_000


def test_unknown_key_is_line_anchored(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text('{\n"target": {"kind": "peak"},\n"typo_key": 1\n}\n')
    assert main(["train", "--config", str(p)]) == 2
    err = capsys.readouterr().err
    assert f"{p}:3" in err and "typo_key" in err


def test_unknown_nested_key_rejected(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text('{\n"target": {"kind": "peak"},\n'
                 '"model": {\n"n_layers": 4\n}\n}\n')
    assert main(["train", "--config", str(p)]) == 2
    err = capsys.readouterr().err
    assert f"{p}:4" in err and "n_layers" in err and "model" in err


def test_missing_config_file(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "nope.json")]) == 2
    assert "cannot read config" in capsys.readouterr().err


def test_invalid_json_reports_line(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text('{\n"target": {"kind": "peak"},,\n}\n')
    assert main(["train", "--config", str(p)]) == 2
    assert f"{p}:2" in capsys.readouterr().err


def test_bad_values_exit_two(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text('{"target": {"kind": "hexagon"}}\n')
    assert main(["train", "--config", str(p)]) == 2
    write_cfg(p, train={"steps": 25, "lr": -1.0})
    assert main(["train", "--config", str(p)]) == 2
    capsys.readouterr()


def test_unknown_flag_exits_two(tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["train", "--config", "x", "--frobnicate"])
    assert e.value.code == 2


# ---------------------------------------------------------------------------
# train

def test_train_writes_artifacts(trained):
    _, out = trained
    for name in ("checkpoint.npz", "metrics.csv", "resolved_config.json",
                 "version.txt"):
        assert (out / name).exists()
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == "step,nll,lr,wall_time_ms"
    assert len(lines) == 26
    assert lines[1].startswith("0,0.0,")   # identity init: exact zero NLL
    assert "so3flow" in (out / "version.txt").read_text()


def test_resolved_config_reloads(trained):
    cfg_path, out = trained
    resolved = cli.load_config(out / "resolved_config.json")
    assert resolved == cli.load_config(cfg_path)


def test_train_determinism_excluding_walltime(trained, workdir):
    cfg_path, out = trained
    out2 = workdir / "run_again"
    assert main(["train", "--config", str(cfg_path), "--out", str(out2)]) == 0

    def stripped(p):
        rows = p.read_text().splitlines()
        return [",".join(r.split(",")[:3]) for r in rows]

    assert stripped(out / "metrics.csv") == stripped(out2 / "metrics.csv")


def test_out_flag_and_env_override(workdir, monkeypatch):
    cfg = write_cfg(workdir / "env.json", out_dir=str(workdir / "ignored"),
                    train={"steps": 0, "dataset_size": 400})
    env_out = workdir / "env_out"
    monkeypatch.setenv("SO3FLOW_OUT", str(env_out))
    assert main(["train", "--config", str(cfg)]) == 0
    assert (env_out / "checkpoint.npz").exists()
    assert not (workdir / "ignored").exists()
    # explicit flag beats the environment
    flag_out = workdir / "flag_out"
    assert main(["train", "--config", str(cfg), "--out", str(flag_out)]) == 0
    assert (flag_out / "checkpoint.npz").exists()


# ---------------------------------------------------------------------------
# eval / entropy

def read_reports(out):
    recs = json.loads((out / "reports.json").read_text())
    return {r["metric"]: r for r in recs}


def test_eval_identity_checkpoint(identity_run, workdir, capsys):
    cfg, out = identity_run
    eval_out = workdir / "id_eval"
    code = main(["eval", "--config", str(cfg),
                 "--checkpoint", str(out / "checkpoint.npz"),
                 "--out", str(eval_out), "--n", "256"])
    assert code == 0
    recs = read_reports(eval_out)
    assert recs["avg_log_likelihood"]["value"] == 0.0
    assert recs["mc_entropy"]["value"] == 0.0
    assert recs["mc_entropy"]["stderr"] == 0.0
    assert recs["quadrature_entropy"]["value"] == 0.0
    assert recs["normalization"]["value"] == 1.0
    assert recs["spread_deg"]["value"] > 1.0   # uniform samples vs one fiber
    assert "config_hash" in recs["avg_log_likelihood"]
    # records are also printed one per line
    printed = capsys.readouterr().out.strip().splitlines()
    assert len(printed) == len(recs)


def test_eval_trained_model_consistency(trained, workdir):
    cfg, out = trained
    eval_out = workdir / "eval"
    code = main(["eval", "--config", str(cfg),
                 "--checkpoint", str(out / "checkpoint.npz"),
                 "--out", str(eval_out), "--n", "2048"])
    assert code == 0
    recs = read_reports(eval_out)
    # 25 steps moved the model off identity
    assert recs["avg_log_likelihood"]["value"] != 0.0
    assert 0.9 < recs["normalization"]["value"] < 1.1
    # MC entropy agrees with the quadrature entropy of the same density
    gap = abs(recs["mc_entropy"]["value"] - recs["quadrature_entropy"]["value"])
    assert gap < 3.0 * recs["mc_entropy"]["stderr"] + 1e-3


def test_eval_arch_mismatch_exits_two(trained, workdir, capsys):
    cfg_path, out = trained
    other = write_cfg(workdir / "wide.json", model={"blocks": 2})
    code = main(["eval", "--config", str(other),
                 "--checkpoint", str(out / "checkpoint.npz"),
                 "--out", str(workdir / "mismatch")])
    assert code == 2
    assert "architecture" in capsys.readouterr().err


def test_eval_requires_checkpoint(trained, workdir, capsys):
    cfg, _ = trained
    assert main(["eval", "--config", str(cfg),
                 "--out", str(workdir / "nockpt")]) == 2
    capsys.readouterr()


def test_entropy_command(identity_run, workdir):
    cfg, out = identity_run
    ent_out = workdir / "ent"
    code = main(["entropy", "--config", str(cfg),
                 "--checkpoint", str(out / "checkpoint.npz"),
                 "--out", str(ent_out), "--n", "64"])
    assert code == 0
    recs = read_reports(ent_out)
    assert recs["mc_entropy"]["value"] == 0.0
    assert main(["entropy", "--config", str(cfg),
                 "--checkpoint", str(out / "checkpoint.npz"),
                 "--out", str(ent_out), "--n", "1"]) == 2


# ---------------------------------------------------------------------------
# sample / export-viz

def test_sample_command(trained, workdir, capsys):
    cfg, out = trained
    s_out = workdir / "samp"
    code = main(["sample", "--config", str(cfg),
                 "--checkpoint", str(out / "checkpoint.npz"),
                 "--out", str(s_out), "--n", "50"])
    assert code == 0
    recs = [json.loads(l) for l in
            (s_out / "samples.jsonl").read_text().splitlines()]
    assert len(recs) == 50
    for r in recs:
        q = np.array(r["quat"])
        assert abs(np.linalg.norm(q) - 1.0) < 1e-9
        assert q[np.nonzero(q)[0][0]] > 0   # canonical sign
        assert np.isfinite(r["log_prob"])
    # n = 0 is a rejected argument
    assert main(["sample", "--config", str(cfg),
                 "--checkpoint", str(out / "checkpoint.npz"),
                 "--out", str(s_out), "--n", "0"]) == 2
    capsys.readouterr()


def test_export_viz_sample_mode(trained, workdir, capsys):
    cfg, out = trained
    v_out = workdir / "viz_s"
    code = main(["export-viz", "--config", str(cfg),
                 "--checkpoint", str(out / "checkpoint.npz"),
                 "--out", str(v_out), "--n", "40"])
    assert code == 0
    recs = [json.loads(l) for l in
            (v_out / "viz.jsonl").read_text().splitlines()]
    assert len(recs) == 40
    for r in recs:
        assert abs(np.linalg.norm(r["dir"]) - 1.0) < 1e-9
        assert r["weight"] == 1.0 / 40
    capsys.readouterr()


def test_export_viz_target_grid_mode(workdir, capsys):
    # no checkpoint: the config's target rendered on the viz grid
    cfg = write_cfg(workdir / "viz.json", out_dir=str(workdir / "viz_g"))
    assert main(["export-viz", "--config", str(cfg)]) == 0
    recs = [json.loads(l) for l in
            (workdir / "viz_g" / "viz.jsonl").read_text().splitlines()]
    n_base, n_fiber = so3.balanced_grid_shape(4000)
    assert len(recs) == n_base * n_fiber
    w = np.array([r["weight"] for r in recs])
    assert np.all(w >= 0.0)
    # density weighting: the grid mean of the weights is the total mass
    assert abs(np.mean(w) - 1.0) < 0.05
    capsys.readouterr()


def test_export_viz_deterministic(trained, workdir, capsys):
    cfg, out = trained
    a, b = workdir / "viz_a", workdir / "viz_b"
    for dest in (a, b):
        assert main(["export-viz", "--config", str(cfg),
                     "--checkpoint", str(out / "checkpoint.npz"),
                     "--out", str(dest), "--n", "30"]) == 0
    assert (a / "viz.jsonl").read_bytes() == (b / "viz.jsonl").read_bytes()
    capsys.readouterr()

import json

import pytest

from cppomdp import cli
from cppomdp.learner import TrainingFault

TINY = """\
task: muling
n_targets: 0
map_size: 4
num_areas: 4
num_buoys: 4
n_train_robot: 8
n_train_sensor: 8
n_round: 1
n_test: 6
warmup: 10
batch_size: 4
wave_size: 4
log_episodes: 3
"""


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text(TINY)
    return p


def run(argv, capsys):
    code = cli.main(["-q", *argv])
    return code, capsys.readouterr()


def test_train_eval_plot_replay(tiny, tmp_path, capsys):
    out = tmp_path / "run"
    code, cap = run(["train", "--config", str(tiny), "--strategy", "djcc", "--seed", "5", "--out", str(out)], capsys)
    assert code == 0
    summary = json.loads(cap.out)
    assert summary["strategy"] == "djcc" and summary["test"]["count"] == 6
    for name in ("metrics.json", "config.yaml", "manifest.json", "heatmap_location.csv",
                 "heatmap_transmission.csv", "training_curves.png", "checkpoints/robot.ckpt",
                 "checkpoints/sensor_3.ckpt", "episodes/episode_00002.jsonl"):
        assert (out / name).exists(), name
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 5 and [p["name"] for p in manifest["phases"]] == [
        "djcc-robot-0", "djcc-sensor-0", "djcc-robot-1"]

    code, cap = run(["eval", "--checkpoint", str(out)], capsys)
    assert code == 0 and json.loads(cap.out)["test"] == summary["test"]

    code, cap = run(["replay", "--checkpoint", str(out), "--episode", "2"], capsys)
    assert code == 0 and json.loads(cap.out)["identical"]

    code, _ = run(["plot", str(out), "--out", str(tmp_path / "fig")], capsys)
    assert code == 0
    assert (tmp_path / "fig" / "nstep_boxplot.png").exists()
    assert (tmp_path / "fig" / "heatmap_location_djcc.png").exists()


def test_replay_detects_a_tampered_log(tiny, tmp_path, capsys):
    out = tmp_path / "run"
    assert run(["train", "--config", str(tiny), "--strategy", "rc", "--out", str(out)], capsys)[0] == 0
    p = out / "episodes" / "episode_00000.jsonl"
    lines = p.read_text().splitlines()
    head = json.loads(lines[0])
    head["seed"] = "tampered"
    p.write_text("\n".join([json.dumps(head)] + lines[1:]) + "\n")
    code, _ = run(["replay", "--checkpoint", str(out), "--episode", "0"], capsys)
    assert code == cli.EXIT_MISMATCH


def test_episodes_flag_overrides_the_config(tiny, tmp_path, capsys):
    out = tmp_path / "run"
    assert run(["train", "--config", str(tiny), "--strategy", "cc", "--episodes", "4", "--out", str(out)],
               capsys)[0] == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["phases"][0]["episodes"] == 4


def test_set_overrides(tiny, tmp_path, capsys):
    out = tmp_path / "run"
    code, _ = run(["train", "--config", str(tiny), "--strategy", "oc", "--set", "n_test=2", "--out", str(out)],
                  capsys)
    assert code == 0 and json.loads((out / "manifest.json").read_text())["n_test"] == 2


def test_config_errors_exit_2(tiny, tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("rho: 0.1\n")
    assert run(["train", "--config", str(bad), "--out", str(tmp_path / "x")], capsys)[0] == cli.EXIT_CONFIG
    assert run(["train", "--config", str(tmp_path / "nope.yaml"), "--out", str(tmp_path / "x")],
               capsys)[0] == cli.EXIT_CONFIG
    assert run(["train", "--config", str(tiny), "--set", "bogus=1", "--out", str(tmp_path / "x")],
               capsys)[0] == cli.EXIT_CONFIG
    assert run(["eval"], capsys)[0] == cli.EXIT_CONFIG


def test_training_fault_exits_3(tiny, tmp_path, capsys, monkeypatch):
    def boom(self, *a, **k):
        raise TrainingFault("non-finite loss")

    monkeypatch.setattr(cli.Trainer, "train", boom)
    code, cap = run(["train", "--config", str(tiny), "--out", str(tmp_path / "x")], capsys)
    assert code == cli.EXIT_FAULT and "non-finite" in cap.err


def test_train_requires_out(capsys):
    with pytest.raises(SystemExit):
        cli.main(["train"])

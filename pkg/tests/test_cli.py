import json

import numpy as np
import pytest

from srlrnn.cli import main
from srlrnn.nets import Networks
from srlrnn.pipeline import load_state
from srlrnn.srl import TrainConfig

SMALL = ["--set", "batch_size=16", "--set", "lstm_hidden=6", "--set", "static_hidden=3",
         "--set", "disease_hidden=4", "--set", "hidden=[12,12]"]


def run(root, *argv):
    """Run the command line and return (exit code, run directories created)."""
    before = set(root.iterdir()) if root.exists() else set()
    code = main(["--output-root", str(root), *map(str, argv)])
    after = set(root.iterdir()) if root.exists() else set()
    return code, sorted(after - before)


@pytest.fixture(scope="module")
def cohort_file(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    code, (d,) = run(root, "simulate", "--n", 60, "--seed", 1)
    assert code == 0
    return d / "cohort.jsonl"


def test_simulate_is_reproducible(tmp_path, capsys):
    _, (a,) = run(tmp_path, "simulate", "--n", 30, "--seed", 7)
    _, (b,) = run(tmp_path, "simulate", "--n", 30, "--seed", 7)
    assert a != b
    assert (a / "cohort.jsonl").read_bytes() == (b / "cohort.jsonl").read_bytes()
    summary = json.loads((a / "summary.json").read_text())
    assert summary["n"] == 30 and 0 <= summary["survival_rate"] <= 1
    assert json.loads((a / "config.json").read_text())["seed"] == 7
    assert "survival_rate=" in capsys.readouterr().out


def test_usage_errors_exit_2_without_run_dir(tmp_path):
    assert run(tmp_path, "simulate", "--n", 0) == (2, [])
    assert run(tmp_path, "simulate", "--set", "bogus=1") == (2, [])
    assert run(tmp_path, "train", "--data", "x.jsonl", "--epsilon", 1.5) == (2, [])
    assert run(tmp_path, "frobnicate") == (2, [])


def test_config_file_and_precedence(tmp_path):
    conf = tmp_path / "c.yaml"
    conf.write_text("seed: 3\nsimulate:\n  n: 12\n  model: {dose: 0.4}\n")
    _, (d,) = run(tmp_path / "r", "simulate", "--config", conf, "--n", 9)
    cfg = json.loads((d / "config.json").read_text())
    assert (cfg["n"], cfg["seed"], cfg["model"]["dose"]) == (9, 3, 0.4)
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"simulate": {"model": {"nope": 1}}}))
    assert run(tmp_path / "r", "simulate", "--config", bad)[0] == 2


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("SRLRNN_OUTPUT_ROOT", str(tmp_path / "env"))
    assert main(["simulate", "--n", "5"]) == 0
    (d,) = list((tmp_path / "env").iterdir())
    assert d.name.startswith("simulate-") and (d / "cohort.jsonl").exists()


def test_missing_data_exits_3(tmp_path):
    assert run(tmp_path, "train", "--data", tmp_path / "absent.jsonl")[0] == 3
    assert run(tmp_path, "preprocess", "--input", tmp_path / "absent_dir.jsonl")[0] == 3


def test_train_zero_epochs_checkpoint_is_initialization(tmp_path, cohort_file):
    code, (d,) = run(tmp_path, "train", "--data", cohort_file, "--epochs", 0, "--seed", 5, *SMALL)
    assert code == 0
    state = load_state(d / "checkpoint.json")
    init = Networks.initialize(state.nets.dims, 5)
    for k, v in init.actor.items():
        assert np.array_equal(state.nets.actor[k], v)
    assert state.trace == [] and state.epochs_done == 0


def test_train_resume_and_evaluate(tmp_path, cohort_file):
    common = ["--data", cohort_file, "--seed", 2, *SMALL]
    _, (full,) = run(tmp_path, "train", "--epochs", 3, *common)
    _, (part,) = run(tmp_path, "train", "--epochs", 1, *common)
    code, (resumed,) = run(tmp_path, "train", "--epochs", 3, "--resume", part / "checkpoint.json", *common)
    assert code == 0
    assert (full / "metrics.csv").read_text() == (resumed / "metrics.csv").read_text()
    assert len((full / "metrics.csv").read_text().splitlines()) == 4
    a, b = load_state(full / "checkpoint.json"), load_state(resumed / "checkpoint.json")
    assert all(np.array_equal(a.nets.critic[k], b.nets.critic[k]) for k in a.nets.critic)

    ckpt = full / "checkpoint.json"
    _, (e1,) = run(tmp_path, "evaluate", "--checkpoint", ckpt, "--data", cohort_file)
    _, (e2,) = run(tmp_path, "evaluate", "--checkpoint", ckpt, "--data", cohort_file)
    for name in ("jaccard.csv", "mortality_curve.csv", "difference_curve.csv", "returns.csv", "summary.json"):
        assert (e1 / name).read_bytes() == (e2 / name).read_bytes()
    _, (doc,) = run(tmp_path, "evaluate", "--checkpoint", ckpt, "--data", cohort_file, "--doctor")
    assert json.loads((doc / "summary.json").read_text())["jaccard"] == 1.0

    other = tmp_path / "other"
    _, (o,) = run(other, "simulate", "--n", 5, "--set", "model.n_ts=4")
    assert run(tmp_path, "evaluate", "--checkpoint", ckpt, "--data", o / "cohort.jsonl")[0] == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergent_training_exits_4(tmp_path, cohort_file):
    code, _ = run(tmp_path, "train", "--data", cohort_file, "--epochs", 2, *SMALL,
                  "--set", "optimizer=\"sgd\"", "--set", "critic_lr=1e200", "--set", "grad_clip=null")
    assert code == 4


def test_preprocess_jsonl_round_trip(tmp_path, cohort_file):
    _, (d,) = run(tmp_path, "preprocess", "--input", cohort_file)
    assert (d / "admissions.jsonl").read_bytes() == cohort_file.read_bytes()
    assert (d / "exclusions.csv").read_text().startswith("admission_id,reason")


def test_sweep_small(tmp_path, capsys):
    code, (d,) = run(tmp_path, "sweep-epsilon", "--epsilons", "0,1", "--seeds", "0", "--n-admissions", 40,
                     "--set", "survival_episodes=20", "--set", "train.epochs=1", "--set", "train.lstm_hidden=4",
                     "--set", "train.hidden=[8,8]")
    assert code == 0
    assert len((d / "sweep_runs.csv").read_text().splitlines()) == 3
    assert "epsilon" in capsys.readouterr().out

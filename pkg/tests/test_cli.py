"""End-to-end checks of the command-line interface."""

import json

import numpy as np
import pytest

from gridquest.cli import main
from gridquest.perception import (Dataset, save_dataset, synthesize_frames,
                                  REFERENCE_LABEL_RATES)
from gridquest.policy import (DISCRETE_ACTIONS, DemoStep, DemoTrajectory,
                              save_demos)
from gridquest.replay import ReplayStore


def test_run_count_zero_writes_nothing(tmp_path, capsys):
    out = tmp_path / "replays"
    code = main(["run", "--task", "FindCave", "--condition", "Human",
                 "--count", "0", "--out", str(out)])
    assert code == 0
    assert list(out.glob("*")) == []


def test_run_unknown_task_is_a_usage_error(tmp_path):
    with pytest.raises(SystemExit) as err:
        main(["run", "--task", "FindUnicorn", "--out", str(tmp_path)])
    assert err.value.code != 0


def test_demo_collection_requires_human_condition(tmp_path, capsys):
    code = main(["run", "--task", "FindCave", "--condition", "Hybrid",
                 "--count", "1", "--out", str(tmp_path / "r"),
                 "--demos-out", str(tmp_path / "d")])
    assert code == 2
    assert "Human" in capsys.readouterr().err


def test_run_writes_loadable_replays(tmp_path, capsys):
    out = tmp_path / "replays"
    code = main(["run", "--task", "FindCave", "--condition", "Human",
                 "--seed", "3", "--count", "1", "--max-ticks", "300",
                 "--out", str(out)])
    assert code == 0
    store = ReplayStore(out)
    ids = store.ids()
    assert ids == ["FindCave-Human-3"]
    replay = store.load(ids[0])
    assert replay.task == "FindCave"
    assert replay.condition == "Human"
    assert len(replay.ticks) >= 1
    stdout = capsys.readouterr().out
    assert "FindCave-Human-3" in stdout


def test_demo_collection_writes_corpus_and_demos(tmp_path, capsys):
    demo_dir = tmp_path / "corpus"
    code = main(["run", "--task", "FindCave", "--condition", "Human",
                 "--seed", "3", "--count", "1", "--max-ticks", "200",
                 "--out", str(tmp_path / "unused"),
                 "--demos-out", str(demo_dir)])
    assert code == 0
    assert (demo_dir / "corpus_FindCave.txt").exists()
    assert (demo_dir / "demos_FindCave.txt").exists()
    assert list((tmp_path / "unused").glob("*")) in ([], [tmp_path / "unused"])


def _fake_demos(rng, per_action=30):
    steps = []
    for a, action in enumerate(DISCRETE_ACTIONS):
        center = np.zeros(16)
        center[a] = 4.0
        for _ in range(per_action):
            feats = center + rng.normal(scale=0.3, size=16)
            steps.append(DemoStep(features=feats, action=action))
    rng.shuffle(steps)
    return [DemoTrajectory(steps=tuple(steps), episode="synthetic")]


def test_train_bc_writes_artifact_and_report(tmp_path):
    rng = np.random.default_rng(9)
    corpus = tmp_path / "demos.txt"
    save_demos(_fake_demos(rng), corpus)
    out = tmp_path / "models" / "bc.txt"
    code = main(["train", "bc", "--corpus", str(corpus),
                 "--seed", "4", "--out", str(out)])
    assert code == 0
    assert out.exists()
    report = json.loads(out.with_suffix(".txt.report.json").read_text())
    assert report["gradient_check_pass"] is True
    assert report["gradient_check_max_rel_err"] < 1e-5
    assert report["train_size"] == 7 * 30
    assert report["train_accuracy"] > 0.9


def test_train_classifier_writes_artifact_and_report(tmp_path):
    rng = np.random.default_rng(5)
    frames = synthesize_frames(600, rng, rates=REFERENCE_LABEL_RATES)
    corpus = tmp_path / "frames.txt"
    save_dataset(Dataset(frames), corpus)
    out = tmp_path / "models" / "classifier.txt"
    code = main(["train", "classifier", "--corpus", str(corpus),
                 "--seed", "4", "--out", str(out)])
    assert code == 0
    assert out.exists()
    report = json.loads(out.with_suffix(".txt.report.json").read_text())
    assert report["gradient_check_pass"] is True
    assert report["split_sizes"] == [480, 60, 60]


def test_train_missing_corpus_fails(tmp_path, capsys):
    code = main(["train", "bc", "--corpus", str(tmp_path / "absent.txt"),
                 "--out", str(tmp_path / "bc.txt")])
    assert code == 1
    assert "not found" in capsys.readouterr().err


def test_export_on_empty_data_dir_writes_headers_only(tmp_path, capsys):
    data = tmp_path / "data"
    data.mkdir()
    out = tmp_path / "csv"
    code = main(["export", "--data", str(data), "--out", str(out)])
    assert code == 0
    assert (out / "leaderboard.csv").read_text().splitlines() == \
        ["metric,condition,mu,sigma"]
    assert (out / "pairwise.csv").read_text().splitlines() == \
        ["metric,condition_a,condition_b,a_wins,b_wins,draws,matches"]

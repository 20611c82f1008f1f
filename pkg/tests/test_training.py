import csv
import json

import pytest
import torch

from conftest import tiny_experiment
from vithash.backbone import CheckpointMismatch, ConfigError, read_checkpoint
from vithash.config import build_config
from vithash.objectives import LossBreakdown
from vithash import training
from vithash.training import (
    NonFiniteLoss,
    evaluate,
    load_network,
    load_splits,
    train_student,
    train_teacher,
)


def cfg(root, out, **extra):
    return build_config(tiny_experiment(root, out, **extra))


@pytest.fixture(scope="module")
def teacher_run(small_synthetic_root, tmp_path_factory):
    out = tmp_path_factory.mktemp("teacher")
    return train_teacher(cfg(small_synthetic_root, out, preset="teacher"))


def read_log(path):
    with open(path) as f:
        return list(csv.DictReader(f))


def test_teacher_artifacts(teacher_run):
    out = teacher_run.output_dir
    for name in ("final.pt", "best.pt", "log.csv", "steps.csv", "run.json", "effective_config.yaml"):
        assert (out / name).exists(), name
    rows = read_log(out / "log.csv")
    assert [int(r["epoch"]) for r in rows] == [0, 1]
    assert list(rows[0]) == ["epoch", *LossBreakdown.FIELDS]
    assert float(rows[0]["high"]) == 0.0
    assert json.loads((out / "run.json").read_text())["epochs"] == 2


def test_teacher_frozen_prefix_untouched(teacher_run, small_synthetic_root):
    trained, _ = load_network(teacher_run.checkpoint)
    fresh = training.HashNetwork(trained.encoder.config, 8, seed=0)
    for (name, a), (_, b) in zip(trained.named_parameters(), fresh.named_parameters()):
        frozen = name.startswith("encoder.embed.") or name.startswith("encoder.blocks.0.")
        assert torch.equal(a, b) == frozen, name


def test_student_requires_teacher_when_distilling(small_synthetic_root, tmp_path):
    with pytest.raises(ConfigError):
        train_student(cfg(small_synthetic_root, tmp_path, preset="full"), None)


def test_student_rejects_wrong_checkpoint(teacher_run, small_synthetic_root, tmp_path):
    c = cfg(small_synthetic_root, tmp_path, preset="full", teacher={"hidden_dim": 32})
    with pytest.raises(CheckpointMismatch):
        train_student(c, teacher_run.checkpoint)


def test_teacher_checkpoint_unchanged_by_student(teacher_run, small_synthetic_root, tmp_path):
    before = teacher_run.checkpoint.read_bytes()
    res = train_student(cfg(small_synthetic_root, tmp_path, preset="full"), teacher_run.checkpoint)
    assert teacher_run.checkpoint.read_bytes() == before
    rows = read_log(res.output_dir / "log.csv")
    assert all(float(r["distill"]) > 0 and float(r["local"]) > 0 for r in rows)
    _, tensors, _ = read_checkpoint(res.checkpoint)
    assert any(k.startswith("projections.") for k in tensors)


def test_zero_beta_matches_method2(small_synthetic_root, tmp_path, teacher_run):
    a = train_student(cfg(small_synthetic_root, tmp_path / "a", preset="method2"))
    b = train_student(cfg(small_synthetic_root, tmp_path / "b", preset="method5",
                          loss={"beta_student": 0.0}), teacher_run.checkpoint)
    assert (a.output_dir / "log.csv").read_text() == (b.output_dir / "log.csv").read_text()
    rows = read_log(a.output_dir / "log.csv")
    assert all(float(r[k]) == 0.0 for r in rows for k in ("high", "global", "local", "distill"))


def test_method1_has_no_triplet(small_synthetic_root, tmp_path):
    res = train_student(cfg(small_synthetic_root, tmp_path, preset="method1"))
    rows = read_log(res.output_dir / "log.csv")
    assert all(float(r["triplet"]) == 0.0 and float(r["total"]) == float(r["contrastive"]) for r in rows)


def test_augmentation_schedule_logged(small_synthetic_root, tmp_path):
    res = train_teacher(cfg(small_synthetic_root, tmp_path, preset="teacher", epochs_teacher=4))
    steps = read_log(res.output_dir / "steps.csv")
    lams = sorted({float(s["lambda"]) for s in steps})
    assert lams == [0.0, 0.125, 0.25, 0.375]


def test_deterministic_reruns_identical(small_synthetic_root, tmp_path):
    runs = []
    for name in ("a", "b"):
        c = cfg(small_synthetic_root, tmp_path / name, preset="teacher", deterministic=True)
        runs.append(train_teacher(c))
    assert (runs[0].output_dir / "log.csv").read_bytes() == (runs[1].output_dir / "log.csv").read_bytes()


def test_nonfinite_loss_stops_with_dump(small_synthetic_root, tmp_path, monkeypatch):
    monkeypatch.setattr(training, "supervised_contrastive", lambda h, *a, **k: h.sum() * float("nan"))
    c = cfg(small_synthetic_root, tmp_path, preset="teacher")
    with pytest.raises(NonFiniteLoss):
        train_teacher(c)
    dump = json.loads((tmp_path / "teacher" / "nonfinite_dump.json").read_text())
    assert dump["epoch"] == 0 and dump["step"] == 0


def test_evaluate_outputs(teacher_run, small_synthetic_root, tmp_path):
    c = cfg(small_synthetic_root, tmp_path, eval={"k_grid": [1, 3, 5]})
    stores = load_splits(c)
    report = evaluate(c, teacher_run.checkpoint, stores=stores)
    out = tmp_path / "eval" / "teacher"
    metrics = (out / "metrics.csv").read_text().splitlines()
    assert len(metrics) - 1 == 2 * 3 + 1
    pr = (out / "pr.csv").read_text().splitlines()
    assert len(pr) - 1 == len(stores[0])
    assert 0.0 <= report.map <= 1.0 and (out / "gallery.codes").exists()


def test_evaluate_rejects_size_mismatch(teacher_run, small_synthetic_root, tmp_path):
    c = cfg(small_synthetic_root, tmp_path, data={"image_size": 8})
    with pytest.raises(ConfigError):
        evaluate(c, teacher_run.checkpoint)


def test_load_network_role_check(teacher_run):
    with pytest.raises(CheckpointMismatch):
        load_network(teacher_run.checkpoint, role="student")
    with pytest.raises(CheckpointMismatch):
        load_network(teacher_run.checkpoint, code_bits=16)


def test_disabled_augmentation_matches_method2(small_synthetic_root, tmp_path):
    a = train_student(cfg(small_synthetic_root, tmp_path / "a", preset="method2"))
    b = train_student(cfg(small_synthetic_root, tmp_path / "b", preset="method3", augment={"enabled": False}))
    assert (a.output_dir / "log.csv").read_text() == (b.output_dir / "log.csv").read_text()

import numpy as np
import pytest
import yaml

from vithash.backbone import ConfigError
from vithash.cli import main
from vithash.config import PRESETS, build_config, load_config, parse_override, preset_values
from vithash.retrieval import build_index


def test_defaults_match_reference_settings():
    cfg = build_config()
    assert cfg.loss.temperature == 0.1 and cfg.loss.alpha_teacher == 1
    assert (cfg.loss.alpha_student, cfg.loss.beta_student, cfg.loss.gamma) == (2, 2, 0.3)
    assert cfg.optim.learning_rate == 5e-4 and cfg.batch_size == 128
    assert (cfg.epochs_teacher, cfg.epochs_student) == (100, 300)
    assert cfg.teacher.hidden_dim == 512 and cfg.teacher.num_layers == 12


@pytest.mark.parametrize("preset,alpha,beta,gamma,aug", [
    ("method1", 0, 0, 0, False),
    ("method2", 2, 0, 0, False),
    ("method3", 2, 0, 0, True),
    ("method4", 2, 2, 0, False),
    ("method5", 2, 2, 0.3, False),
    ("full", 2, 2, 0.3, True),
])
def test_presets(preset, alpha, beta, gamma, aug):
    cfg = build_config({"preset": preset})
    assert (cfg.loss.alpha_student, cfg.loss.beta_student, cfg.loss.gamma) == (alpha, beta, gamma)
    assert cfg.augment.enabled is aug


def test_teacher_preset_enables_augmentation():
    assert build_config({"preset": "teacher"}).augment.enabled


def test_override_beats_file_beats_preset():
    cfg = build_config({"preset": "method5", "loss": {"gamma": 0.1}}, ["loss.gamma=0.3"])
    assert cfg.loss.gamma == 0.3
    assert build_config({"preset": "method5", "loss": {"gamma": 0.1}}).loss.gamma == 0.1


def test_parse_override():
    assert parse_override("eval.k_grid=[1, 2]") == {"eval": {"k_grid": [1, 2]}}
    with pytest.raises(ConfigError):
        parse_override("no_equals")


def test_unknown_key_lists_valid_keys():
    with pytest.raises(ConfigError, match="loss.gamma"):
        build_config(overrides=["loss.gama=0.3"])


def test_image_size_propagates():
    cfg = build_config({"data": {"image_size": 32}, "teacher": {"hidden_dim": 64, "patch_size": 4},
                        "student": {"hidden_dim": 32, "patch_size": 4}})
    assert cfg.teacher.image_size == cfg.student.image_size == 32


def test_dump_reload(tmp_path):
    cfg = load_config("configs/synthetic.yaml", ["loss.gamma=0.2"])
    cfg.dump(tmp_path / "c.yaml")
    again = load_config(tmp_path / "c.yaml")
    assert again.to_dict() == cfg.to_dict()


def test_every_preset_builds():
    for p in PRESETS:
        assert "augment" in preset_values(p)
        build_config({"preset": p})


def test_missing_config_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train-teacher"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_key_exits_nonzero(capsys):
    assert main(["train-teacher", "--config", "configs/synthetic.yaml", "--set", "bogus=1"]) == 1
    assert "unknown config key" in capsys.readouterr().err


@pytest.fixture
def index_file(tmp_path):
    rng = np.random.default_rng(0)
    idx = build_index(rng.integers(-1, 2, (20, 8)), rng.integers(0, 3, 20), np.arange(100, 120))
    idx.save(tmp_path / "g.codes")
    return tmp_path / "g.codes"


def test_retrieve_prints_k_ids(index_file, capsys):
    assert main(["retrieve", "--index", str(index_file), "--code", "1,1,1,1,-1,-1,0,0", "--k", "5"]) == 0
    lines = capsys.readouterr().out.split()
    assert len(lines) == 5 and all(100 <= int(x) < 120 for x in lines)


def test_retrieve_bit_mismatch(index_file, capsys):
    assert main(["retrieve", "--index", str(index_file), "--code", "1,1", "--k", "5"]) == 1
    assert "bits" in capsys.readouterr().err


def test_make_synthetic_cli(tmp_path, capsys):
    assert main(["make-synthetic", "--out", str(tmp_path / "d"), "--classes", "2", "--per-class", "3",
                 "--image-size", "8"]) == 0
    assert "6 images" in capsys.readouterr().out


def test_augment_preview(tmp_path, small_synthetic_root):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"data": {"root": str(small_synthetic_root), "image_size": 16},
                                   "teacher": {"hidden_dim": 16, "num_layers": 2, "patch_size": 4},
                                   "student": {"hidden_dim": 8, "num_layers": 2, "patch_size": 4}}))
    assert main(["augment-preview", "--config", str(cfg), "--out", str(tmp_path / "p.png"), "--n", "4"]) == 0
    assert (tmp_path / "p.png").stat().st_size > 0

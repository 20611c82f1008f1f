import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from vithash.data import make_synthetic  # noqa: E402


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def synthetic_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synthetic")
    make_synthetic(root, num_classes=4, per_class=50, image_size=32, seed=0)
    return root


@pytest.fixture(scope="session")
def small_synthetic_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("small_synthetic")
    make_synthetic(root, num_classes=3, per_class=6, image_size=16, seed=1)
    return root


def tiny_experiment(root, out, **extra):
    """Values for a seconds-long training run on ``small_synthetic_root``."""
    values = {
        "data": {"root": str(root), "image_size": 16},
        "teacher": {"hidden_dim": 16, "num_layers": 2, "patch_size": 4},
        "student": {"hidden_dim": 8, "num_layers": 2, "patch_size": 4},
        "code_bits": 8,
        "epochs_teacher": 2,
        "epochs_student": 2,
        "batch_size": 4,
        "window_size": 2,
        "output_dir": str(out),
        "plots": False,
        "eval": {"k_grid": [1, 3]},
    }
    for key, value in extra.items():
        if isinstance(value, dict):
            values.setdefault(key, {}).update(value)
        else:
            values[key] = value
    return values


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(module.RESULTS, key=lambda s: int(s.split()[1])):
        terminalreporter.write_line(line)

import sys

import pytest

from c2f_apv.config import config_from_dict


def tiny_config(out_dir, **extra):
    """A configuration small enough to train all phases in seconds."""
    raw = {
        "seed": 5,
        "output_dir": str(out_dir / "run"),
        "dataset": {"data_dir": str(out_dir / "data"), "num_samples": 6, "test_fraction": 0.34},
        "phantom": {"grid": [24, 24, 24], "radii": [[3, 3, 3], [3, 3, 3], [3, 3, 3]], "center_jitter": 1.0},
        "augment": {"enabled": False},
        "model": {"coarse_width": 2, "saliency_width": 2, "fine_width": 2, "prior_dim": 4, "prior_hidden": 4},
        "crop": {"cube_size": 8},
        "optim": {"lr": 0.01, "clip_norm": 1.0},
        "phases": {
            "coarse": {"epochs": 1, "batch_size": 8, "slices_per_epoch": 16},
            "fine": {"epochs": 1, "batch_size": 3},
            "joint": {"epochs": 1, "batch_size": 1},
        },
    }
    for key, value in extra.items():
        if isinstance(value, dict):
            raw.setdefault(key, {}).update(value)
        else:
            raw[key] = value
    return config_from_dict(raw)


@pytest.fixture
def tiny_cfg(tmp_path):
    return tiny_config(tmp_path)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

import json

import numpy as np
import pytest

from config import config_from_dict
from utils.denoiser import ArchConfig, init_denoiser
from utils.diffusion import build_schedule


def tiny_config_data(**overrides):
    data = {
        "method": "er",
        "seed": 0,
        "steps_per_task": 20,
        "batch_size": 16,
        "buffer_capacity": 32,
        "log_every": 10,
        "dataset": {"kind": "mixture2d", "num_tasks": 2, "classes_per_task": 2, "samples_per_task": 100},
        "schedule": {"T": 10, "beta_min": 1e-3, "beta_max": 0.3},
        "model": {"hidden": 8, "depth": 1, "time_dim": 4},
        "eval": {"n_eval": 32},
        "regularizer": {"fisher_batches": 2},
    }
    data.update(overrides)
    return data


@pytest.fixture
def tiny_config_dict():
    return tiny_config_data()


@pytest.fixture
def tiny_config(tiny_config_dict):
    return config_from_dict(tiny_config_dict)


@pytest.fixture
def write_config(tmp_path):
    def _write(data, name="config.json"):
        path = tmp_path / name
        path.write_text(json.dumps(data), encoding="utf-8")
        return path

    return _write


@pytest.fixture
def schedule():
    return build_schedule(10, 1e-3, 0.3)


@pytest.fixture
def small_arch():
    return ArchConfig(input_dim=2, num_labels=4, hidden=8, depth=1, time_dim=4)


@pytest.fixture
def small_model(small_arch):
    return init_denoiser(small_arch, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def make_config():
    """Tiny run config with top-level keys replaced (sections are replaced whole)."""

    def _make(**overrides):
        return config_from_dict(tiny_config_data(**overrides))

    return _make

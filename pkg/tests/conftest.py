import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from ulegray import data

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))
torch.set_num_threads(max(1, min(4, os.cpu_count() or 1)))


def make_ds(n=60, size=16, seed=0, split="train", offset=0):
    x, y = data.generate_synthetic(n, seed, size=size)
    return data.ImageDataset(x, y, np.arange(offset, offset + n), split, 3, name=f"tiny{seed}")


@pytest.fixture
def tiny_train():
    return make_ds(60, 16, 0)


@pytest.fixture
def tiny_test():
    return make_ds(30, 16, 1, "test")


@pytest.fixture
def data_root(tmp_path, monkeypatch):
    monkeypatch.setenv(data.DATA_ROOT_ENV, str(tmp_path / "data"))
    return tmp_path / "data"


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)

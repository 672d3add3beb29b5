import numpy as np
import pytest

from dsal.data import DatasetConfig, make_dataset, stack
from dsal.segnet import ModelConfig


@pytest.fixture(scope="session")
def small_data():
    """A 32x32 dataset small enough for per-test training."""
    return make_dataset(DatasetConfig(resolution=(32, 32), n_train=24, n_val=4, n_test=6, seed=3))


@pytest.fixture(scope="session")
def small_cfg():
    return ModelConfig(depth=2, base_channels=4, input_size=(32, 32), seed=0)


@pytest.fixture
def batch4(small_data):
    return stack(small_data.train[:4])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria report one line each; printed after the run
CRITERIA = []


def record_criterion(number, ok, detail):
    CRITERIA.append((number, bool(ok), detail))
    return ok


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(CRITERIA, key=lambda c: c[0]):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")

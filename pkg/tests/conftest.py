import numpy as np
import pytest
import torch

from dasgil.config import toy_run_config
from dasgil.dataman import generate_toy_dataset

# filled by test_acceptance; printed once at the end of the session
ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def toy_cfg():
    return toy_run_config(0)


@pytest.fixture(scope="session")
def toy_data(tmp_path_factory, toy_cfg):
    """Default toy world: 4 sequences x 16 frames x 3 environments + real copies."""
    out = tmp_path_factory.mktemp("toy")
    return generate_toy_dataset(toy_cfg.toy, out)


@pytest.fixture(scope="session")
def small_data(tmp_path_factory, toy_cfg):
    cfg = toy_cfg.copy()
    cfg.toy.sequences = 2
    out = tmp_path_factory.mktemp("toy_small")
    return generate_toy_dataset(cfg.toy, out)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

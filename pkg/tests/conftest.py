import numpy as np
import pytest

from dialect_auth.datasets import gen_srv_dataset
from dialect_auth.ddm import MlpModel, write_model
from dialect_auth.dialects import register_ftp_dialects
from dialect_auth.srv import train_tree

# acceptance results, printed once at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def registry():
    return register_ftp_dialects()


@pytest.fixture(scope="session")
def fast_registry():
    """Dialect 7 without its artificial delay, for network tests."""
    return register_ftp_dialects(d7_delay=0.0)


@pytest.fixture(scope="session")
def srv_tree(registry):
    x, y = gen_srv_dataset(registry, 3000, seed=11)
    return train_tree(x, y)


@pytest.fixture(scope="session")
def random_model():
    return MlpModel.glorot(15, seed=5)


@pytest.fixture(scope="session")
def random_model_path(tmp_path_factory, random_model):
    path = tmp_path_factory.mktemp("model") / "random.bin"
    write_model(random_model, path)
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

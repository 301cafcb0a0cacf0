import numpy as np
import pytest

from secure_fedxgb import he
from secure_fedxgb.dataset import make_synthetic


@pytest.fixture(scope="session")
def keypair512():
    return he.keygen(512, rng_seed=1234)


@pytest.fixture
def toy_data():
    return make_synthetic(n_rows=300, n_features=6, seed=3, positive_rate=0.3)


def assert_forests_equal(a, b):
    assert a.dumps() == b.dumps()


def rng(seed=0):
    return np.random.default_rng(seed)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[k])

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from trgs.problems import logistic_oracle, make_imbalanced_mixture

settings.register_profile("trgs", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("trgs")


@pytest.fixture(scope="session")
def small_data():
    return make_imbalanced_mixture(4, 3, 20, [1.0, 0.7, 0.4], seed=0, separation=2.0)


@pytest.fixture(scope="session")
def small_logistic(small_data):
    return logistic_oracle(small_data)


@pytest.fixture
def gen():
    return np.random.default_rng(12345)


ACCEPTANCE = {}


def report(criterion: int, passed: bool, detail: str):
    """Record one acceptance line; printed together at the end of the session."""
    ACCEPTANCE[criterion] = f"{'PASS' if passed else 'FAIL'}  criterion {criterion:>2}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from policyflow.config import REWARD_KEYS, CatalogEntry, reward_values
from policyflow.measures import RewardField, make_grid

settings.register_profile(
    "default", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large])
settings.load_profile("default")

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    def log(number: int, passed: bool, detail: str):
        line = f"ACCEPTANCE {number:>2} {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
    return log


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


def catalog_reward(kind: str, lo=-2.0, hi=2.0, n=128, **params) -> RewardField:
    grid = make_grid(lo, hi, n)
    entry = CatalogEntry(kind, {**REWARD_KEYS[kind], **params})
    return RewardField(grid, reward_values(entry, grid.centers))


@pytest.fixture(params=["quadratic", "bimodal", "linear"])
def reward_kind(request):
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fhtensor.environments import make_env

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def grid():
    return make_env("gridworld", "paper")


@pytest.fixture(scope="session")
def grid_mdp(grid):
    return grid.model


VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one acceptance line; all lines are printed at the end of the run."""
    lines = request.config.stash.setdefault(VERDICTS, [])

    def record(number, text, ok):
        lines.append(f"{'PASS' if ok else 'FAIL'}  criterion {number}: {text}")
        print(lines[-1])
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)

import numpy as np
import pytest
from hypothesis import settings

from transferop.dynamics import builtin_potential, simulate_pairs

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def ou_small():
    """OU pairs (alpha=1, beta=4, tau=0.5) small enough for unit tests."""
    return simulate_pairs(builtin_potential("ou", alpha=1.0, beta=4.0), 4000, 100, 0.005, seed=3)


@pytest.fixture(scope="session")
def ou_full():
    """The acceptance-size OU dataset: m = 20000 pairs at tau = 0.5."""
    return simulate_pairs(builtin_potential("ou", alpha=1.0, beta=4.0), 20000, 100, 0.005, seed=0)


def random_gram(rng, n, rank=None, scale=1.0):
    B = rng.standard_normal((rank or n, n)) * scale
    return B.T @ B


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance") or __import__("sys").modules.get("tests.test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)

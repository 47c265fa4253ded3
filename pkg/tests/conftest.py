import numpy as np
import pytest


def random_spd(rng, n, cond_floor=0.5):
    a = rng.standard_normal((n, n))
    return a @ a.T / n + cond_floor * np.eye(n)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

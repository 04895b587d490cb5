import numpy as np
import pytest

_CRITERIA = pytest.StashKey[list]()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config.stash[_CRITERIA] = []


@pytest.fixture
def criterion(request):
    """``criterion(cid, title, ok, detail)``: print a PASS/FAIL line and assert ``ok``."""

    def check(cid, title, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {cid}: {title}" + (f" ({detail})" if detail else "")
        print(line)
        request.config.stash[_CRITERIA].append(line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

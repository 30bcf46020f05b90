import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


_ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_log():
    """Record one PASS/FAIL line per acceptance criterion; echoed in the terminal summary."""
    def log(number, ok, detail, seconds, limit=None):
        budget = f" (limit {limit:.0f} s)" if limit else ""
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail} [{seconds:.1f} s{budget}]"
        _ACCEPTANCE_LINES.append(line)
        print(line)
    return log


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)

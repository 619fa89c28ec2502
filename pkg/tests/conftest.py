import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("repo", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one summary line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES, key=lambda k: (len(k), k)):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])

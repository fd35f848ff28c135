"""Shared fixtures and the acceptance-criteria terminal summary."""

import pytest
import torch
from hypothesis import settings

torch.set_num_threads(1)

settings.register_profile("ci", deadline=None, max_examples=25)
settings.load_profile("ci")

# one line per acceptance criterion, echoed after the test summary
CRITERION_LINES: list[str] = []


@pytest.fixture(scope="session")
def criterion_log():
    return CRITERION_LINES


def pytest_terminal_summary(terminalreporter):
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERION_LINES):
            terminalreporter.write_line(line)

"""Shared fixtures."""

from __future__ import annotations

import pytest

from twincal.experiments import ToyProblem, toy_problem

# PASS/FAIL lines from the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES: list = []


@pytest.fixture(scope="session")
def toy() -> ToyProblem:
    """Noise-free 40-point toy problem with its 42-run design."""
    return toy_problem()


def pytest_terminal_summary(terminalreporter) -> None:
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

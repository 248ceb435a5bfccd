"""Shared fixtures: synthetic benchmark datasets and the acceptance reporter.

The acceptance reporter collects one PASS/FAIL line per criterion and replays
them in the terminal summary, so the verdict for every criterion is visible
in one block regardless of output capturing.
"""

from __future__ import annotations

import pytest

from lfss.episodes import SyntheticSpec, generate_synthetic

_ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance():
    """Record one visible PASS/FAIL line for an acceptance criterion, then
    assert it."""

    def record(criterion: int, title: str, passed: bool, detail: str = ""):
        status = "PASS" if passed else "FAIL"
        line = f"[acceptance {criterion}] {status} — {title}"
        if detail:
            line += f" ({detail})"
        _ACCEPTANCE.append(line)
        print(line)
        assert passed, line

    return record


@pytest.fixture(scope="session")
def bench4(tmp_path_factory):
    """Default benchmark: delta/sigma = 4, the hard separability setting."""
    spec = SyntheticSpec()
    return generate_synthetic(spec, tmp_path_factory.mktemp("bench4")), spec


@pytest.fixture(scope="session")
def bench10(tmp_path_factory):
    """Easy separability setting (delta/sigma = 10)."""
    spec = SyntheticSpec(delta=10.0)
    return generate_synthetic(spec, tmp_path_factory.mktemp("bench10")), spec


@pytest.fixture(scope="session")
def clean10(tmp_path_factory):
    """Easy separability and uncorrupted pseudo-masks, for fitting tests."""
    spec = SyntheticSpec(delta=10.0, rho=0.0, morph_radius=0)
    return generate_synthetic(spec, tmp_path_factory.mktemp("clean10")), spec

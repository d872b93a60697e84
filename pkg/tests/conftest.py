"""Shared fixtures: one simulated default build, run through every stage once."""

import numpy as np
import pytest

from ldedtwin import pipeline as pl
from ldedtwin import sim
from ldedtwin.config import PipelineConfig


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """(session_dir, out_dir) for the default seed-7 build after `all`."""
    root = tmp_path_factory.mktemp("default")
    session_dir = root / "session"
    sim.write_simulation(sim.BuildSpec(), session_dir)
    out = root / "out"
    pl.run_all(session_dir, out, PipelineConfig())
    return session_dir, out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE: list = []


@pytest.fixture
def criterion(capsys):
    """Record and print one PASS/FAIL line for an acceptance criterion, then assert."""

    def check(number: int, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:2d}: {detail}"
        _ACCEPTANCE.append(line)
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)

import os
from pathlib import Path

import pytest

from freda_lab import harness as H

CACHE = Path(os.environ.get("FREDA_CACHE_DIR", Path(__file__).resolve().parent.parent / ".cache"))


@pytest.fixture(scope="session")
def std_data():
    return H.standard_datasets()


@pytest.fixture(scope="session")
def std_checkpoint(std_data):
    """Benchmark source model; trained once (about 1.5 min) and cached on disk."""
    return H.standard_checkpoint(std_data[0], cache=CACHE / "standard-seed0.frda")


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import LINES
    except ImportError:
        return
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)

import os

import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def f64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


@pytest.fixture
def out_root(tmp_path, monkeypatch):
    monkeypatch.setenv("SAMIMO_OUTPUT_ROOT", str(tmp_path / "runs"))
    return tmp_path / "runs"


def pytest_collection_modifyitems(config, items):
    if os.environ.get("SAMIMO_SKIP_SLOW"):
        skip = pytest.mark.skip(reason="SAMIMO_SKIP_SLOW set")
        for it in items:
            if "slow" in it.keywords:
                it.add_marker(skip)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

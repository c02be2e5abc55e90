from pathlib import Path

import pytest

from precswitch.config import load_config

ROOT = Path(__file__).resolve().parent.parent
CC_CONFIG = ROOT / "configs" / "cc.json"


@pytest.fixture(scope="session")
def cc():
    return load_config(CC_CONFIG)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

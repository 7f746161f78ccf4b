from pathlib import Path

import pytest
import torch

DATA = Path(__file__).parent / "data"
DESK_IMAGES = ["astronaut_64.png", "coffee_64.png", "chelsea_64.png", "rocket_64.png", "ihc_64.png"]


def pytest_configure(config):
    torch.set_num_threads(1)


@pytest.fixture
def data_dir():
    return DATA


# acceptance results, one line per criterion, echoed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])

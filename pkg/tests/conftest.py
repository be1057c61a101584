import pytest

from recast_lab.env import generate_dataset
from recast_lab.sid import CatalogShape

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def shape888():
    return CatalogShape(8, 8, 8)


@pytest.fixture
def small_dataset():
    return generate_dataset(CatalogShape(4, 4, 4), 16, seed=3)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

from pathlib import Path

import pytest
import torch
from hypothesis import HealthCheck, settings

from gibbsdiff.problems import graph_instance, load_sudoku

DATA = Path(__file__).parent / "data"

settings.register_profile(
    "default",
    max_examples=60,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")

SOLVED_4X4 = "1234341221434321"
K4_EDGES = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]


@pytest.fixture(autouse=True)
def _single_thread():
    # keeps float reductions reproducible across runs
    torch.set_num_threads(1)


@pytest.fixture
def data_dir():
    return DATA


@pytest.fixture
def solved4():
    return load_sudoku(SOLVED_4X4)


@pytest.fixture
def k4_two():
    return graph_instance("coloring", 4, K4_EDGES, k=2)


@pytest.fixture
def p3_mis():
    return graph_instance("mis", 3, [(0, 1), (1, 2)])


@pytest.fixture
def triangle_cut():
    return graph_instance("maxcut", 3, [(0, 1), (0, 2), (1, 2)])


# one line per acceptance criterion, printed after the run even when output is captured
ACCEPTANCE: dict[str, str] = {}


@pytest.fixture
def acceptance():
    def record(key: str, passed: bool, detail: str) -> bool:
        line = f"{key} {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE[key] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (len(k.split()[0]), k)):
        terminalreporter.write_line(ACCEPTANCE[key])

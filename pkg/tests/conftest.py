import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report(capsys):
    """Print one acceptance line straight to the terminal and keep it for the summary."""
    def emit(line: str) -> None:
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print(f"\n{line}")
    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

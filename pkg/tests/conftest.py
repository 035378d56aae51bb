from pathlib import Path

import numpy as np
import pytest

DATA_DIR = Path(__file__).parent / "data"
MNIST_IMAGES = DATA_DIR / "mnist40-images-idx3-ubyte"
MNIST_LABELS = DATA_DIR / "mnist40-labels-idx1-ubyte"

# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])

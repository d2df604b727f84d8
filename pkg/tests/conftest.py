import numpy as np
import pytest

from robustdet.toydet import ShapesDatasetSpec, ToyDetector, ToyDetectorConfig, generate_shapes_dataset

SMALL_DET = ToyDetectorConfig(backbone_width=8, head_width=8)


@pytest.fixture(scope="session")
def tiny_data():
    return generate_shapes_dataset(ShapesDatasetSpec(n_images=12, contrast=(0.15, 0.4), seed=7))


@pytest.fixture
def tiny_det():
    return ToyDetector(SMALL_DET, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# One line per acceptance criterion, echoed in the terminal summary so that a
# plain ``pytest -v`` run shows them without ``-s``.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

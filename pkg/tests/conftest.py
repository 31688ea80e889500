import numpy as np
import pytest

from posetransfer.data import generate_toy_dataset, load_dataset
from posetransfer.pose import NUM_JOINTS, KeypointSet

ACCEPTANCE_LINES: list[str] = []

TOY_CANVAS = (64, 32)
TOY_SIGMA = 2.0
TOY_RADIUS = 2


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def single_keypoint(x, y, size=(32, 32), joint=0):
    pts = np.full((NUM_JOINTS, 3), -1.0)
    pts[:, 2] = 0
    pts[joint] = (x, y, 1)
    return KeypointSet(pts, size)


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    generate_toy_dataset(root, 100, TOY_CANVAS, seed=0)
    return root


@pytest.fixture(scope="session")
def toy_records(toy_root):
    return load_dataset(toy_root)


@pytest.fixture(scope="session")
def small_toy_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy_small")
    generate_toy_dataset(root, 10, TOY_CANVAS, seed=3)
    return root

import numpy as np
import pytest

from lidarvq import scenes, voxel


@pytest.fixture(scope="session")
def small_pairs():
    return [scenes.make_pair(scenes.random_scene(scenes.derive_seed(11, i))) for i in range(6)]


@pytest.fixture(scope="session")
def small_grids(small_pairs):
    cfg = voxel.GridConfig()
    return [voxel.voxelize(p.dense, cfg) for p in small_pairs]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = []


def record(number, name, passed, detail):
    line = f"criterion {number:2d} {name}: {'PASS' if passed else 'FAIL'} ({detail})"
    ACCEPTANCE.append((number, line))
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)

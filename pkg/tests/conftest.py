import numpy as np
import pytest

from deltanerf.field import FieldArch, FieldParams
from deltanerf.scene import gen_terrain, make_dataset

# small enough for fast gradient checks and single-digit-second training
TINY = FieldArch(width=16, depth=4, skip_layer=3, head_hidden=8, levels_x=2, levels_d=1, embed_dim=2)


@pytest.fixture(scope="session")
def tiny_arch():
    return TINY


@pytest.fixture(scope="session")
def scene():
    return gen_terrain(0)


@pytest.fixture(scope="session")
def small_split(scene):
    return make_dataset(scene, 2, 2, 2, seed=0, size=12)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_base():
    return FieldParams.init(TINY, n_images=3, seed=5)


# acceptance verdicts, printed once at the end of the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)

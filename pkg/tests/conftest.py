import numpy as np
import pytest

from ocdm_isac.scene import ArrayGeometry, Scene, Target
from ocdm_isac.waveform import DssPlan, WaveformConfig


@pytest.fixture(scope="session")
def cfg():
    return WaveformConfig()


@pytest.fixture(scope="session")
def geometry(cfg):
    return ArrayGeometry.uniform(512, cfg.wavelength, 1.0)


@pytest.fixture(scope="session")
def plan():
    return DssPlan(dss=(0, 48, 96, 192), dsa=(0, 170, 341, 511))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_scene(geometry, positions, velocities=None):
    positions = np.atleast_2d(positions)
    if velocities is None:
        velocities = np.zeros_like(positions)
    targets = tuple(Target(np.asarray(p, float), np.asarray(v, float))
                    for p, v in zip(positions, np.atleast_2d(velocities)))
    return Scene(geometry, targets)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)

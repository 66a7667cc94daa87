import numpy as np
import pytest

from evnet.demo import load_demo
from evnet.scenes import preset, scene_generate

# filled by tests/test_acceptance.py, printed once at the end of the session
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])


@pytest.fixture(scope="session")
def demo():
    return load_demo()


@pytest.fixture(scope="session")
def moving_video():
    return scene_generate(preset("moving_sprite"), seed=0)


@pytest.fixture(scope="session")
def static_video():
    return scene_generate(preset("static"), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

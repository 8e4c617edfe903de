import numpy as np
import pytest

from mvface.synth import RigSpec, generate_model, generate_scene


@pytest.fixture(scope="session")
def model():
    return generate_model(0)


@pytest.fixture(scope="session")
def small_model():
    return generate_model(3, V=300, n_id=4, n_exp=3, n_alb=3)


@pytest.fixture(scope="session")
def scene(model):
    return generate_scene(model, RigSpec(seed=0))


@pytest.fixture(scope="session")
def scene40(model):
    return generate_scene(model, RigSpec(seed=1, yaw_step=40.0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_log():
    return _ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

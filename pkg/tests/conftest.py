import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from slupoison.dataset import SynthConfig, generate_synthetic
from slupoison.model import TrainConfig, train

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# small corpus shared by the unit tests; the acceptance suite builds its own
TINY = SynthConfig(n_train=120, n_dev=30, n_test=40, seed=11)


@pytest.fixture(scope="session")
def tiny():
    return generate_synthetic(TINY)


@pytest.fixture(scope="session")
def tiny_model(tiny):
    params, _ = train(tiny, TrainConfig(epochs=4, seed=5))
    return params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one verdict line per acceptance criterion, echoed after the run
VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)

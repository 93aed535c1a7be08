import numpy as np
import pytest

from crowdflow import data
from crowdflow.spn import SpnConfig
from crowdflow.train import TrainConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_config():
    """4x4 grid, short histories, one residual unit."""
    return SpnConfig(h=4, w=4, n=2, m=2, n_units=1, intervals_per_day=8, ext_length=data.external_length(4))


@pytest.fixture(scope="session")
def tiny_dataset():
    """5 days x 8 intervals on a 4x4 grid, last day held out."""
    cfg = data.SynthConfig(days=5, intervals_per_day=8, h=4, w=4, test_days=1, peak_slots=(3,))
    return data.synthesize(cfg, seed=7)


@pytest.fixture(scope="session")
def tiny_train_config():
    return TrainConfig(n=2, m=2, n_units=1, epochs=2, batch_size=8, lr=1e-3)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance(request):
    """Callable ``(label, passed, detail)`` that records one PASS/FAIL line."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(label: str, passed: bool, detail: str) -> bool:
        line = f"{'PASS' if passed else 'FAIL'}  {label}: {detail}"
        lines.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

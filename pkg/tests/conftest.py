import numpy as np
import pytest
import torch

from unimov import PointCloud

_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def record_criterion(request):
    """Call with (name, passed, detail) to add a line to the acceptance summary."""
    lines = request.config.stash[_ACCEPTANCE]

    def record(name, passed, detail=""):
        line = f"{'PASS' if passed else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
        lines.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _single_thread():
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    yield
    torch.set_num_threads(threads)


def random_cloud(rng, n, n_classes=4, spread=2.0):
    pos = rng.uniform(-spread, spread, size=(n, 3))
    col = rng.integers(0, 256, size=(n, 3))
    sem = rng.integers(0, n_classes, size=n)
    return PointCloud(pos, col, sem, sem)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

import numpy as np
import pytest
from hypothesis import settings

from fedbackdoor.data import corner_trigger, synthetic_blobs
from fedbackdoor.flcore import FLConfig, build_federation

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture(scope="session")
def blobs():
    return synthetic_blobs(n=1200, seed=3)


@pytest.fixture(scope="session")
def trigger():
    return corner_trigger((8, 8), 1, 7)


@pytest.fixture
def small_cfg():
    return FLConfig.desk(K=8, M=2, kappa=0.5, T=6, E=2, B=32, eta=0.1, hidden=(16, 8))


@pytest.fixture
def small_fed(small_cfg, blobs, trigger):
    return build_federation(small_cfg, blobs, trigger)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def report(request, capsys):
    """Print and collect one PASS/FAIL line per acceptance criterion."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def emit(n, ok, detail):
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        with capsys.disabled():
            print(f"\n{line}")

    return emit


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)

import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

from insert_nco.core import CVRP, TSP, Instance  # noqa: E402

DATA = Path(__file__).parent / "data"


def square() -> Instance:
    return Instance(TSP, [[0, 0], [1, 0], [1, 1], [0, 1]])


@pytest.fixture
def unit_square():
    return square()


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))


def random_tsp(rng, n) -> Instance:
    return Instance(TSP, rng.random((n, 2)))


def random_cvrp(rng, n, capacity=None) -> Instance:
    dem = np.concatenate([[0], rng.integers(1, 10, n)])
    cap = capacity if capacity is not None else float(rng.integers(10, 31))
    return Instance(CVRP, rng.random((n + 1, 2)), dem, cap)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])

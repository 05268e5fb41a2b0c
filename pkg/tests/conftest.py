import numpy as np
import pytest

from uibrec import _accel, synthetic
from uibrec.dataset import InteractionSet, prepare_bundle


@pytest.fixture(params=["numba", "numpy"])
def backend(request):
    prev = _accel.set_backend(request.param)
    yield request.param
    _accel.set_backend(prev)


@pytest.fixture(scope="session")
def tiny_raw():
    return synthetic.generate(synthetic.Profile(40, 160, 20.0, min_degree=6, rank=4), seed=3)


@pytest.fixture(scope="session")
def tiny_bundle(tiny_raw):
    return prepare_bundle(tiny_raw, "tiny", split_seed=0, n_neg=100)


@pytest.fixture(scope="session")
def small_bundle():
    """~100 users x 600 items; big enough for directional training checks."""
    raw = synthetic.generate(synthetic.Profile(120, 600, 40.0, min_degree=10, rank=4), seed=11)
    return prepare_bundle(raw, "small", split_seed=0, n_neg=100)


def random_interactions(rng, n_users, n_items, density=0.3, role="raw"):
    mask = rng.random((n_users, n_items)) < density
    u, x = np.nonzero(mask)
    return InteractionSet.from_pairs(u, x, n_users, n_items, role)


# -- acceptance verdict lines ----------------------------------------------

VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """``verdict(n, ok, detail)`` records one criterion line for the summary."""
    def record(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'} | {detail}"
        VERDICTS.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)

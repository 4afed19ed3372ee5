import numpy as np
import pytest

from zsquant.fixtures import make_fixture


def central_difference(f, x, step=1e-3):
    """Numerical gradient of scalar ``f`` at ``x`` (float64, element by element)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        hi = f(x)
        flat[i] = old - step
        lo = f(x)
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * step)
    return g


def max_rel_err(a, b, floor=1e-6):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    scale = max(np.abs(a).max(), np.abs(b).max(), floor)
    return float(np.abs(a - b).max() / scale)


@pytest.fixture(scope="session")
def tiny3():
    return make_fixture("tiny3", 0)


@pytest.fixture(scope="session")
def skipnet():
    return make_fixture("skipnet", 0)


@pytest.fixture(scope="session")
def nobn():
    return make_fixture("nobn", 0)

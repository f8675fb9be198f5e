import numpy as np
import pytest

from boss_opt.core import OfflineDataset, SeededRng
from boss_opt.surrogate import MlpSpec, SurrogateParams, init_params


def random_params(spec, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    return SurrogateParams(scale * rng.standard_normal(spec.n_params), spec)


def linear_params(w, b=0.0):
    """Single-layer surrogate g(x) = w.x + b."""
    w = np.asarray(w, dtype=float)
    return SurrogateParams(np.concatenate([w, [b]]), MlpSpec((w.size, 1)))


def random_dataset(n, d, seed, y_fn=None):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, (n, d))
    y = y_fn(X) if y_fn is not None else rng.standard_normal(n)
    return OfflineDataset(X, y, -10.0, 10.0)


@pytest.fixture
def small_spec():
    return MlpSpec((3, 5, 4, 1), "tanh")


@pytest.fixture
def small_net(small_spec):
    return random_params(small_spec, 0, 0.7)


@pytest.fixture
def small_data():
    return random_dataset(40, 3, 1)


@pytest.fixture
def tiny_net():
    """2-4-1 tanh net used where dense Hessians are needed."""
    spec = MlpSpec((2, 4, 1))
    return init_params(spec, SeededRng(3))


# acceptance lines collected by test_acceptance.py and printed after the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])

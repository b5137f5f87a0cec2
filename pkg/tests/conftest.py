import numpy as np
import pytest

from layertime.network import Batch, ControlTrajectory, NetworkShape


def random_theta(shape, rng, scale=0.5):
    def u(*s):
        return rng.uniform(-scale, scale, s)
    return ControlTrajectory(u(shape.w, shape.n_f), u(shape.N, shape.w, shape.w),
                             u(shape.N, shape.w), u(shape.n_c, shape.w), u(shape.n_c), shape)


def random_batch(s, n_f, n_c, rng):
    y = rng.uniform(-1, 1, (s, n_f))
    labels = np.zeros((s, n_c))
    labels[np.arange(s), rng.integers(0, n_c, s)] = 1.0
    return Batch(y, labels)


def central_diff(f, x, step=1e-6):
    g = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += step
        xm[i] -= step
        g[i] = (f(xp) - f(xm)) / (2 * step)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_problem(rng):
    shape = NetworkShape(2, 3, 4, 4, 1.0)
    return shape, random_theta(shape, rng), random_batch(5, 2, 4, rng)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

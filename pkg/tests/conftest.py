import numpy as np
import pytest

from stjem import energy_net


class QuadraticEnergy:
    """f(x)_0 = -|x - center|^2 / 2 with one class; grad_x f = -(x - center)."""

    dy = 1

    def __init__(self, dx=1, center=0.0):
        self.dx = dx
        self.center = center

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        return (-0.5 * np.sum((x - self.center) ** 2, axis=-1))[..., None]

    def grad_input(self, x, head="marginal"):
        return -(np.asarray(x, dtype=np.float64) - self.center)

    def head_energy(self, x, head="marginal"):
        return self.forward(x)[..., 0]


class NanEnergy(QuadraticEnergy):
    def grad_input(self, x, head="marginal"):
        return np.full(np.shape(x), np.nan)


def linear_net(W, b):
    """Single-layer network with the given weights (Dy x Dx) and bias."""
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    net = energy_net.EnergyNetwork((W.shape[1], W.shape[0]), "swish")
    params = np.zeros(net.n_params)
    (Wv, bv), = net.layers(params)
    Wv[...] = W
    bv[...] = b
    net.params = params
    return net


def fd_grad(fn, theta, eps=1e-5):
    """Central finite differences of a scalar function of a flat vector."""
    g = np.empty_like(theta)
    for i in range(theta.size):
        t = theta.copy()
        t[i] += eps
        up = fn(t)
        t[i] -= 2 * eps
        g[i] = (up - fn(t)) / (2 * eps)
    return g


def rel_err(a, b):
    """Max-abs error relative to the larger gradient scale (guards tiny entries)."""
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b)) / scale)


@pytest.fixture
def quad():
    return QuadraticEnergy()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)

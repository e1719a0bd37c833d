import numpy as np
import pytest

from calcurve import netcore as nc


def tiny_net(seed=0, d=3, hidden=((5, "tanh"),), K=3, scheme="uniform-fan-in"):
    spec = nc.NetworkSpec(d, tuple(hidden), K, init_seed=seed, init_scheme=scheme)
    return nc.init_network(spec)


def linear_net(W, b=None, seed=0):
    K, d = W.shape
    p = tiny_net(seed, d, (), K)
    p.blocks()[0][0][...] = W
    p.blocks()[0][1][...] = 0.0 if b is None else b
    return p


def random_tiny_net(seed):
    """Small net with randomised depth, widths, activation and class count."""
    rng = np.random.default_rng(seed)
    depth = int(rng.integers(1, 3))
    act = "tanh" if seed % 3 else "relu"
    hidden = tuple((int(rng.integers(2, 6)), act) for _ in range(depth))
    d, K = int(rng.integers(2, 5)), int(rng.integers(2, 5))
    return tiny_net(seed, d, hidden, K, scheme="gaussian-scaled" if seed % 2 else "uniform-fan-in"), rng


def fd_gradient(f, x, h=1e-6):
    """Central finite differences of a scalar function of a flat vector."""
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def dense_jacobian(params, x, h=1e-6):
    """Logit Jacobian w.r.t. parameters (K x P) by central differences."""
    x = np.atleast_2d(x)
    cols = []
    for i in range(len(params)):
        e = np.zeros(len(params))
        e[i] = h
        zp = nc.logits(params.with_values(params.values + e), x)[0]
        zm = nc.logits(params.with_values(params.values - e), x)[0]
        cols.append((zp - zm) / (2 * h))
    return np.column_stack(cols)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


@pytest.fixture
def net():
    return tiny_net()


ACCEPTANCE_LINES = []


def record_criterion(number, title, passed, detail=""):
    status = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
    line = f"criterion {number:>2} [{status}] {title}" + (f" | {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)

import numpy as np
import pytest

from pqvae.data import SyntheticSpec, generate_synthetic


def central_diff(f, arr, h=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``arr`` (mutated in place)."""
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        fp = f()
        arr[i] = old - h
        fm = f()
        arr[i] = old
        grad[i] = (fp - fm) / (2 * h)
    return grad


def rel_error(a, b, floor=1e-6):
    """Elementwise relative error; the floor keeps near-zero entries from dividing by ~0."""
    a, b = np.asarray(a), np.asarray(b)
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor), initial=0.0)


@pytest.fixture(scope="session")
def clusters10():
    """1000 points in 10 Gaussian clusters, 32-D."""
    return generate_synthetic(SyntheticSpec(10, 100, 32, 1.0, 0))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS):
            terminalreporter.write_line(line)

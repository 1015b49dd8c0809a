import numpy as np
import pytest


def central_difference(f, x, h=1e-5):
    """Numerical gradient of scalar-valued f at x by central differences."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(x)
        flat[i] = orig - h
        lo = f(x)
        flat[i] = orig
        grad.ravel()[i] = (hi - lo) / (2.0 * h)
    return grad


def max_relative_error(a, b, floor=1e-3):
    """Largest elementwise |a - b| / max(|a|, |b|, floor).

    The floor keeps near-zero entries from inflating the ratio; for them the
    comparison degenerates to an absolute tolerance of floor * rtol.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

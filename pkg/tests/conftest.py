import numpy as np
import pytest


def central_diff_grad(fn, arrays, index, h=1e-5):
    """Central finite-difference gradient of scalar fn w.r.t. arrays[index].

    All arrays are float64; fn receives raw numpy arrays and returns a float.
    """
    x = arrays[index]
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn(*arrays)
        flat[i] = orig - h
        down = fn(*arrays)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return np.abs(a - b).max() / denom


@pytest.fixture
def rng():
    return np.random.default_rng(0)

import numpy as np
import pytest

from parl import numerics as nm


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def finite_difference_input_grad(params, x, output_weights, h=1e-5):
    """Central-difference gradient of output_weights . f(x) w.r.t. x."""
    grad = np.zeros_like(x)
    for i in range(len(x)):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        fp = float(nm.mlp_forward(params, xp) @ output_weights)
        fm = float(nm.mlp_forward(params, xm) @ output_weights)
        grad[i] = (fp - fm) / (2 * h)
    return grad


def rel_error(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return np.linalg.norm(a - b) / denom


def fd_loss_grad(loss_fn, get, set_, h=1e-5):
    """Central difference of a scalar loss w.r.t. one parameter accessed via
    get()/set_(value)."""
    base = get()
    set_(base + h)
    up = loss_fn()
    set_(base - h)
    down = loss_fn()
    set_(base)
    return (up - down) / (2 * h)

import numpy as np
import pytest


def finite_diff_grads(params, loss_fn, h=1e-5):
    """Central finite differences of a scalar loss w.r.t. every Param entry.

    Independent of any backward pass: only calls loss_fn() after perturbing
    parameter values in place.
    """
    grads = {}
    for name, p in params:
        g = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_fn()
            flat[i] = orig - h
            lm = loss_fn()
            flat[i] = orig
            gflat[i] = (lp - lm) / (2.0 * h)
        grads[name] = g
    return grads


def relative_grad_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = max(np.linalg.norm(numeric), np.linalg.norm(analytic), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / denom)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

import numpy as np
import pytest


def central_difference(f, arrays, h=1e-5):
    """Central finite-difference gradients of scalar f(*arrays).

    Independent oracle: perturbs every entry of every input array in place
    and evaluates f forward-only. Returns one gradient array per input.
    """
    grads = []
    for a in arrays:
        g = np.zeros_like(a, dtype=np.float64)
        flat = a.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(*arrays)
            flat[i] = orig - h
            fm = f(*arrays)
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def assert_matches_fd(autodiff_grad, fd_grad, tol=1e-4):
    """Spec gradient check: |ad - fd| / max(1, |fd|) < tol, elementwise."""
    ad = np.asarray(autodiff_grad)
    fd = np.asarray(fd_grad)
    rel = np.abs(ad - fd) / np.maximum(1.0, np.abs(fd))
    worst = rel.max() if rel.size else 0.0
    assert worst < tol, f"gradient mismatch: worst relative error {worst:.3e} >= {tol}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

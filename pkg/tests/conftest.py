import numpy as np
import pytest

from tucl.tensor import Tensor, backward, no_grad


def numeric_grad(fn, arrays, idx, step=1e-4):
    """Central finite-difference gradient of scalar ``fn(*arrays)`` w.r.t. ``arrays[idx]``."""
    base = [a.copy() for a in arrays]
    target = base[idx]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        hi = fn(*base)
        flat[i] = old - step
        lo = fn(*base)
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


def check_grads(build, arrays, step=1e-4, tol=1e-3):
    """Compare autodiff gradients of ``build(*tensors)`` (scalar) to central differences."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(*tensors)
    backward(out)

    def scalar(*arrs):
        with no_grad():
            return build(*[Tensor(a) for a in arrs]).item()

    worst = 0.0
    for i, t in enumerate(tensors):
        num = numeric_grad(scalar, arrays, i, step)
        worst = max(worst, rel_err(t.grad, num))
    assert worst < tol, f"gradient relative error {worst:.2e} >= {tol}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

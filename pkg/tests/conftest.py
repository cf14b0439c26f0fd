import numpy as np
import pytest

from essa.tensor import Tape, Tensor, backward


def numeric_grad(fn, tensors, h=1e-5):
    """Central differences of scalar ``fn()`` w.r.t. every entry of each tensor."""
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = fn()
            flat[i] = old - h
            down = fn()
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def analytic_grad(build, tensors):
    """Gradients of the scalar Tensor returned by ``build()`` via the tape."""
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = build()
    backward(loss, tape)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]


def rel_err(a, n, floor=1e-7):
    """Norm-relative error; tensors whose true gradient is zero (both norms below
    ``floor``, i.e. finite-difference round-off only) count as matching."""
    a, n = np.asarray(a), np.asarray(n)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    return 0.0 if scale < floor else float(np.linalg.norm(a - n) / scale)


def check_grads(build, tensors, tol, h=1e-5):
    """Assert tape gradients of ``build`` match central differences for every tensor."""
    ana = analytic_grad(build, tensors)

    def value():
        return float(build().data)

    num = numeric_grad(value, tensors, h)
    for t, a, n in zip(tensors, ana, num):
        assert rel_err(a, n) < tol, (t.shape, rel_err(a, n))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rand_tensor(rng, *shape):
    return Tensor(rng.standard_normal(shape))

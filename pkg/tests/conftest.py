"""Shared oracles for the test suite."""

import numpy as np

from circnet import autograd as ag


def numeric_grad(scalar_fn, tensor, h=1e-5):
    """Central-difference gradient of scalar_fn() with respect to tensor.data."""
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = scalar_fn()
        flat[i] = orig - h
        fm = scalar_fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_error(analytic, numeric):
    """Max absolute difference scaled by the larger of 1 and the gradient magnitude."""
    denom = max(1.0, float(np.max(np.abs(numeric))) if numeric.size else 1.0)
    return float(np.max(np.abs(analytic - numeric))) / denom


def check_gradients(build_loss, tensors, h=1e-5, tol=1e-5):
    """Backward pass vs central differences for every tensor; asserts the tolerance."""
    ag.zero_grads([("t", t) for t in tensors])
    with ag.Tape() as tape:
        loss = build_loss()
        tape.backward(loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def value():
        return float(build_loss().data)

    for t, a in zip(tensors, analytic):
        n = numeric_grad(value, t, h=h)
        err = rel_error(a, n)
        assert err <= tol, f"gradient mismatch for {t.name or 'tensor'}: {err:.3e}"

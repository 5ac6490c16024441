"""Shared test oracles: finite-difference gradient checks."""

import numpy as np

from ssmqa import tensor as T


def finite_difference_grads(fn, params, h=1e-5):
    """Central-difference gradients of scalar ``fn()`` w.r.t. each tensor.

    Independent of the autodiff path: perturbs raw data entries one at a
    time and re-runs the forward.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn()
            flat[i] = orig - h
            down = fn()
            flat[i] = orig
            gf[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric, floor=1e-6):
    scale = np.maximum(np.abs(analytic), np.maximum(np.abs(numeric), floor))
    return float(np.max(np.abs(analytic - numeric) / scale))


def check_gradients(fn, params, h=1e-5, tol=1e-4):
    """Assert analytic grads of scalar-valued ``fn`` match central differences."""
    for p in params:
        p.zero_grad()
    loss = fn()
    T.backward(loss)
    analytic = [np.array(p.grad) for p in params]
    numeric = finite_difference_grads(lambda: fn().item(), params, h=h)
    for p, ana, num in zip(params, analytic, numeric):
        assert ana is not None, "missing gradient"
        err = max_rel_error(ana, num)
        assert err < tol, f"gradient mismatch {err:.3e} on shape {p.shape}"
    return analytic

"""Shared test utilities: gradient checking against the FD oracle."""

import numpy as np

from wakavt.tensor import (
    Tensor,
    backward,
    finite_diff_grad_wrt,
    relative_error,
)

GRAD_TOL = 1e-4  # relative, with the 1e-3 denominator floor


def assert_grads_match(loss_fn, params, h=1e-5, tol=GRAD_TOL, indices=None):
    """Backward pass vs central differences for every param in `params`.

    loss_fn is a zero-argument closure returning a scalar Tensor; it must
    be deterministic (re-seed any rng inside). Returns the worst relative
    error seen, for reporting.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    backward(loss)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        est = finite_diff_grad_wrt(loss_fn, p, h=h, indices=indices)
        if indices is None:
            err = relative_error(analytic, est.data)
        else:
            err = relative_error(analytic.reshape(-1)[list(indices)], est)
        worst = max(worst, err)
        assert err < tol, f"gradient mismatch {err:.3e} (tol {tol:.1e}) on shape {p.shape}"
    return worst


def rand_param(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)

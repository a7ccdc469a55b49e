"""Shared finite-difference comparison used by several test modules."""

import numpy as np

from ddimedit import autodiff as ad


def rel_error(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(b), np.linalg.norm(a), 1e-30)
    return float(np.linalg.norm(a - b) / scale)


def compare(loss_fn, params, eps=1e-6):
    """Relative error between backward() and central differences.

    All parameter gradients are concatenated into one vector first, so
    parameters whose true gradient is exactly zero do not divide by zero.
    """
    with ad.Graph() as g:
        loss = loss_fn()
    analytic = ad.backward(g, loss, params)
    numeric = ad.finite_diff(lambda: loss_fn().item(), params, eps)
    keys = sorted(numeric)
    flat = lambda d: np.concatenate([np.ravel(d[k]) for k in keys])
    return rel_error(flat(analytic), flat(numeric))

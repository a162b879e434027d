"""Central finite-difference gradient checking."""
from __future__ import annotations

import numpy as np


def numerical_grad(fn, tensor, step=1e-5, indices=None):
    """Central differences of scalar ``fn()`` w.r.t. entries of ``tensor.data``.

    ``indices`` restricts the probe to a subset of flat indices; the returned
    array then holds only those entries.
    """
    flat = tensor.data.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.empty(len(idx))
    for j, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + step
        fp = fn().item()
        flat[i] = orig - step
        fm = fn().item()
        flat[i] = orig
        out[j] = (fp - fm) / (2 * step)
    return out


def relative_error(analytic, numeric, atol=1e-8):
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``.

    Returns 0 when both norms are below ``atol``: a gradient that is
    identically zero (a bias feeding a normalization layer) otherwise yields a
    ratio of two round-off values.
    """
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom <= atol:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def check_gradients(fn, tensors, step=1e-5, max_entries=None, rng=None):
    """Compare backward gradients of ``fn()`` against finite differences.

    Returns ``{name_or_position: relative_error}``.  ``max_entries`` caps the
    number of probed entries per tensor (sampled with ``rng``).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    for t in tensors:
        t.zero_grad()
    fn().backward()
    analytic = [t.grad.copy() for t in tensors]
    errors = {}
    for pos, (t, ga) in enumerate(zip(tensors, analytic)):
        n = t.data.size
        if max_entries is not None and n > max_entries:
            idx = np.sort(rng.choice(n, size=max_entries, replace=False))
        else:
            idx = np.arange(n)
        num = numerical_grad(fn, t, step, idx)
        errors[t.name or pos] = relative_error(ga.reshape(-1)[idx], num)
    return errors

"""Central finite-difference oracle for autodiff gradients."""

from __future__ import annotations

import numpy as np

from ..errors import OracleError, UsageError
from .tensor import Tensor, backward, no_grad


def _eval(f) -> float:
    with no_grad():
        v = float(np.asarray(f().data).reshape(()))
    if not np.isfinite(v):
        raise OracleError("objective evaluated to a non-finite value")
    return v


def numerical_grad(f, param: Tensor, h: float = 1e-5, coords=None) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``param`` (optionally at ``coords`` only)."""
    flat = param.data.reshape(-1)
    out = np.full(flat.shape, np.nan)
    idx = range(flat.size) if coords is None else coords
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = _eval(f)
        flat[i] = orig - h
        fm = _eval(f)
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(param.shape)


def grad_check(f, params, h: float = 1e-5, max_coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between autodiff and central differences.

    The error for one coordinate is ``|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)``.
    ``f`` is a zero-argument callable returning a scalar tensor built from
    ``params``. With ``max_coords`` set, each parameter is probed at that many
    randomly chosen coordinates instead of all of them.
    """
    params = list(params)
    for p in params:
        if p.dtype != np.float64:
            raise UsageError(f"grad_check requires float64 parameters, got {p.dtype}")
        p.requires_grad = True
        p.grad = np.zeros_like(p.data)
    loss = f()
    if not np.isfinite(loss.data).all():
        raise OracleError("objective evaluated to a non-finite value")
    backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        coords = None
        if max_coords is not None and p.data.size > max_coords:
            coords = rng.choice(p.data.size, size=max_coords, replace=False)
        fd = numerical_grad(f, p, h, coords)
        ad = p.grad
        mask = ~np.isnan(fd)
        err = np.abs(ad[mask] - fd[mask]) / np.maximum(1.0, np.maximum(np.abs(ad[mask]), np.abs(fd[mask])))
        if err.size:
            worst = max(worst, float(err.max()))
    return worst

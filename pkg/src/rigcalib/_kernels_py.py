"""NumPy implementation of the hot per-correspondence kernel.

This is the reference backend; :mod:`rigcalib._accel` implements the same
contract as a compiled extension and is preferred at import time when
available.  Both backends must agree to near machine precision
(``tests/test_kernels.py`` enforces it) and both use a fixed summation
order, so results do not depend on threading or backend-internal chunking.
"""

from __future__ import annotations

import numpy as np


def robust_normal_equations(
    d: np.ndarray, sigma: np.ndarray, jac: np.ndarray, delta: float
) -> tuple[np.ndarray, np.ndarray, float, np.ndarray]:
    """Accumulate Gauss-Newton terms for a batch of 3-vector residuals.

    Parameters
    ----------
    d : (N, 3) raw residual vectors.
    sigma : (N, 3, 3) symmetric positive definite covariances.
    jac : (N, 3, K) Jacobian of d with respect to the K stacked local
        coordinates of the variable blocks this batch touches.
    delta : Huber threshold on the Mahalanobis norm; ``delta <= 0`` selects
        the plain quadratic loss.

    Returns
    -------
    (H, g, cost, r) where ``H = sum_n w_n J_n^T S_n^-1 J_n`` (K, K),
    ``g = sum_n w_n J_n^T S_n^-1 d_n`` (K,), ``cost = sum_n rho(r_n)`` and
    ``r`` holds the per-residual Mahalanobis norms.  The IRLS weight is
    ``w = rho'(r) / (2 r)``: 1 inside the threshold, ``delta / r`` outside.
    """
    d = np.ascontiguousarray(d, dtype=np.float64)
    sigma = np.ascontiguousarray(sigma, dtype=np.float64)
    jac = np.ascontiguousarray(jac, dtype=np.float64)
    n, k = d.shape[0], jac.shape[2]
    if n == 0:
        return np.zeros((k, k)), np.zeros(k), 0.0, np.zeros(0)

    x = np.linalg.solve(sigma, d[:, :, None])[:, :, 0]
    r2 = np.einsum("ni,ni->n", d, x)
    r = np.sqrt(np.maximum(r2, 0.0))

    if delta > 0.0:
        inlier = r <= delta
        w = np.where(inlier, 1.0, delta / np.maximum(r, 1e-300))
        cost = float(np.where(inlier, r2, 2.0 * delta * r - delta * delta).sum())
    else:
        w = np.ones(n)
        cost = float(r2.sum())

    y = np.linalg.solve(sigma, jac)
    wy = y * w[:, None, None]
    h = np.einsum("nik,nil->kl", jac, wy)
    g = np.einsum("nik,ni->k", jac, x * w[:, None])
    return h, g, cost, r


def mahalanobis_costs(d: np.ndarray, sigma: np.ndarray, delta: float) -> np.ndarray:
    """Per-residual robust costs rho(sqrt(d^T S^-1 d)) without Jacobians."""
    d = np.ascontiguousarray(d, dtype=np.float64)
    if d.shape[0] == 0:
        return np.zeros(0)
    sigma = np.ascontiguousarray(sigma, dtype=np.float64)
    x = np.linalg.solve(sigma, d[:, :, None])[:, :, 0]
    r2 = np.maximum(np.einsum("ni,ni->n", d, x), 0.0)
    if delta <= 0.0:
        return r2
    r = np.sqrt(r2)
    return np.where(r <= delta, r2, 2.0 * delta * r - delta * delta)

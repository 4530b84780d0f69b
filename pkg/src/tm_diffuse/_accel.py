"""Loop-bound numeric kernels with a numba path and a pure-numpy fallback.

Both kernels reduce to matrix products that numpy hands to BLAS, which beats
the numba loops at every size measured (see benchmarks/bench_kernels.py), so
numpy is the default. Set ``TM_DIFFUSE_NUMBA=1`` to use numba when installed.
Tests run the two paths against each other.
"""

from __future__ import annotations

import os

import numpy as np

try:  # pragma: no cover - exercised implicitly
    import numba
except ImportError:  # pragma: no cover
    numba = None

NUMBA_AVAILABLE = numba is not None
USE_NUMBA = NUMBA_AVAILABLE and os.environ.get("TM_DIFFUSE_NUMBA", "0") == "1"


# ---------------------------------------------------------------------------
# EM refinement of tomography estimates


def em_refine_numpy(X, A, Y, iters, eps):
    """Multiplicative EM updates applied column-wise to ``X`` (N, T)."""
    X = np.maximum(np.array(X, dtype=np.float64), eps)
    colsum = A.sum(axis=0)
    active = colsum > 0
    safe_colsum = np.where(active, colsum, 1.0)
    for _ in range(iters):
        AX = A @ X
        ok = AX >= eps
        # a link whose prediction is ~0 contributes a neutral ratio of 1
        ratio = np.where(ok, Y / np.where(ok, AX, 1.0), 1.0)
        factor = (A.T @ ratio) / safe_colsum[:, None]
        X = np.where(active[:, None], X * factor, X)
    return X


def _em_refine_numba_impl(X, A, Y, iters, eps):
    L, N = A.shape
    T = X.shape[1]
    out = np.empty((N, T))
    colsum = np.zeros(N)
    for j in range(N):
        for i in range(L):
            colsum[j] += A[i, j]
    ax = np.empty(L)
    ratio = np.empty(L)
    x = np.empty(N)
    for t in range(T):
        for j in range(N):
            x[j] = max(X[j, t], eps)
        for _ in range(iters):
            for i in range(L):
                s = 0.0
                for j in range(N):
                    s += A[i, j] * x[j]
                ax[i] = s
                ratio[i] = Y[i, t] / s if s >= eps else 1.0
            for j in range(N):
                if colsum[j] > 0:
                    acc = 0.0
                    for i in range(L):
                        acc += A[i, j] * ratio[i]
                    x[j] = x[j] * acc / colsum[j]
        for j in range(N):
            out[j, t] = x[j]
    return out


# ---------------------------------------------------------------------------
# Gaussian-kernel sums for MMD


def gaussian_kernel_sum_numpy(X, Y, gamma, exclude_diagonal):
    """``sum_ij exp(-gamma * |x_i - y_j|^2)``, optionally skipping ``i == j``."""
    xx = np.einsum("ij,ij->i", X, X)
    yy = np.einsum("ij,ij->i", Y, Y)
    d2 = np.maximum(xx[:, None] + yy[None, :] - 2.0 * X @ Y.T, 0.0)
    K = np.exp(-gamma * d2)
    if exclude_diagonal:
        return float(K.sum() - np.trace(K))
    return float(K.sum())


def _gaussian_kernel_sum_numba_impl(X, Y, gamma, exclude_diagonal):
    n, d = X.shape
    m = Y.shape[0]
    total = 0.0
    for i in range(n):
        for j in range(m):
            if exclude_diagonal and i == j:
                continue
            s = 0.0
            for k in range(d):
                diff = X[i, k] - Y[j, k]
                s += diff * diff
            total += np.exp(-gamma * s)
    return total


if NUMBA_AVAILABLE:
    em_refine_numba = numba.njit(cache=True)(_em_refine_numba_impl)
    gaussian_kernel_sum_numba = numba.njit(cache=True)(_gaussian_kernel_sum_numba_impl)
else:  # pragma: no cover
    em_refine_numba = _em_refine_numba_impl
    gaussian_kernel_sum_numba = _gaussian_kernel_sum_numba_impl


def em_refine(X, A, Y, iters, eps=1e-9, use_numba=None):
    use_numba = USE_NUMBA if use_numba is None else use_numba
    X = np.ascontiguousarray(X, dtype=np.float64)
    A = np.ascontiguousarray(A, dtype=np.float64)
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    if use_numba:
        return em_refine_numba(X, A, Y, int(iters), float(eps))
    return em_refine_numpy(X, A, Y, int(iters), float(eps))


def gaussian_kernel_sum(X, Y, gamma, exclude_diagonal=False, use_numba=None):
    use_numba = USE_NUMBA if use_numba is None else use_numba
    X = np.ascontiguousarray(X, dtype=np.float64)
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    if use_numba:
        return float(gaussian_kernel_sum_numba(X, Y, float(gamma), bool(exclude_diagonal)))
    return gaussian_kernel_sum_numpy(X, Y, float(gamma), bool(exclude_diagonal))

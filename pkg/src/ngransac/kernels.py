"""Hot inner loops: residual matrices, inlier scoring and the dense layer.

Every kernel exists twice: a numba-compiled loop (``*_nb``) and a numpy
version (``*_np``).  The public names bind to one of the two according to
``ngransac._accel.USE_NUMBA``.  Both are exercised by the test-suite and
compared in ``benchmarks/bench_kernels.py``.
"""

import math

import numpy as np

from ._accel import USE_NUMBA, njit

# residual reported for a model whose epipolar lines vanish at a point
DEGENERATE_RESIDUAL = np.inf
_DENOM_EPS = 1e-24


# ---------------------------------------------------------------- numpy path
def epipolar_residuals_np(models, corrs):
    """(M,3,3) x (n,4) -> (M,n) first-order symmetric epipolar errors."""
    models = np.asarray(models, dtype=np.float64)
    corrs = np.asarray(corrs, dtype=np.float64)
    n = corrs.shape[0]
    x1 = np.stack([corrs[:, 0], corrs[:, 1], np.ones(n)])  # (3,n)
    x2 = np.stack([corrs[:, 2], corrs[:, 3], np.ones(n)])
    mx = models @ x1  # (M,3,n)
    mtx = np.transpose(models, (0, 2, 1)) @ x2
    num = np.sum(x2[None] * mx, axis=1) ** 2
    den = mx[:, 0] ** 2 + mx[:, 1] ** 2 + mtx[:, 0] ** 2 + mtx[:, 1] ** 2
    out = np.full(num.shape, DEGENERATE_RESIDUAL)
    ok = den >= _DENOM_EPS
    out[ok] = num[ok] / den[ok]
    return out


def line_residuals_np(lines, points):
    """(M,3) x (n,2) -> (M,n) absolute point-line distances (lines normalized)."""
    lines = np.asarray(lines, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    return np.abs(
        lines[:, 0:1] * points[None, :, 0] + lines[:, 1:2] * points[None, :, 1] + lines[:, 2:3]
    )


def hard_counts_np(residuals, tau):
    return np.count_nonzero(np.asarray(residuals) < tau, axis=1).astype(np.int64)


def soft_scores_np(residuals, alpha, beta, tau):
    z = beta * np.asarray(residuals, dtype=np.float64) - beta * tau
    # 1 - sigmoid(z) == sigmoid(-z)
    return alpha * np.sum(_sigmoid_np(-z), axis=1)


def dense_np(x, w, b):
    """Per-row affine map with an accumulation order independent of row position."""
    return np.sum(x[:, :, None] * w[None, :, :], axis=1) + b


def invariant_colsum_np(x):
    """Column sums that are bitwise invariant to row permutations (sorted order)."""
    return np.sum(np.sort(x, axis=0), axis=0)


def _sigmoid_np(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------- numba path
@njit
def epipolar_residuals_nb(models, corrs):
    m_count = models.shape[0]
    n = corrs.shape[0]
    out = np.empty((m_count, n))
    for j in range(m_count):
        e = models[j]
        for i in range(n):
            x, y, u, v = corrs[i, 0], corrs[i, 1], corrs[i, 2], corrs[i, 3]
            mx0 = e[0, 0] * x + e[0, 1] * y + e[0, 2]
            mx1 = e[1, 0] * x + e[1, 1] * y + e[1, 2]
            mx2 = e[2, 0] * x + e[2, 1] * y + e[2, 2]
            mt0 = e[0, 0] * u + e[1, 0] * v + e[2, 0]
            mt1 = e[0, 1] * u + e[1, 1] * v + e[2, 1]
            alg = u * mx0 + v * mx1 + mx2
            den = mx0 * mx0 + mx1 * mx1 + mt0 * mt0 + mt1 * mt1
            if den < 1e-24:
                out[j, i] = np.inf
            else:
                out[j, i] = alg * alg / den
    return out


@njit
def line_residuals_nb(lines, points):
    m_count = lines.shape[0]
    n = points.shape[0]
    out = np.empty((m_count, n))
    for j in range(m_count):
        a, b, c = lines[j, 0], lines[j, 1], lines[j, 2]
        for i in range(n):
            out[j, i] = abs(a * points[i, 0] + b * points[i, 1] + c)
    return out


@njit
def hard_counts_nb(residuals, tau):
    m_count, n = residuals.shape
    out = np.zeros(m_count, dtype=np.int64)
    for j in range(m_count):
        c = 0
        for i in range(n):
            if residuals[j, i] < tau:
                c += 1
        out[j] = c
    return out


@njit
def soft_scores_nb(residuals, alpha, beta, tau):
    m_count, n = residuals.shape
    out = np.empty(m_count)
    for j in range(m_count):
        acc = 0.0
        for i in range(n):
            z = beta * residuals[j, i] - beta * tau
            if z >= 0:
                ez = math.exp(-z)
                acc += ez / (1.0 + ez)
            else:
                acc += 1.0 / (1.0 + math.exp(z))
        out[j] = alpha * acc
    return out


@njit
def dense_nb(x, w, b):
    n, k = x.shape
    h = w.shape[1]
    out = np.empty((n, h))
    for i in range(n):
        for c in range(h):
            acc = 0.0
            for r in range(k):
                acc += x[i, r] * w[r, c]
            out[i, c] = acc + b[c]
    return out


@njit
def invariant_colsum_nb(x):
    n, h = x.shape
    out = np.empty(h)
    for c in range(h):
        col = np.sort(x[:, c])
        acc = 0.0
        for i in range(n):
            acc += col[i]
        out[c] = acc
    return out


def _contig(a):
    return np.ascontiguousarray(a, dtype=np.float64)


if USE_NUMBA:

    def epipolar_residuals(models, corrs):
        return epipolar_residuals_nb(_contig(models), _contig(corrs))

    def line_residuals(lines, points):
        return line_residuals_nb(_contig(lines), _contig(points))

    def hard_counts(residuals, tau):
        return hard_counts_nb(_contig(residuals), float(tau))

    def soft_scores(residuals, alpha, beta, tau):
        return soft_scores_nb(_contig(residuals), float(alpha), float(beta), float(tau))

    def dense(x, w, b):
        return dense_nb(_contig(x), _contig(w), _contig(b))

    # numpy's vectorized sort is about 10x faster than numba's here, so the
    # compiled variant is kept only for the equivalence tests
    invariant_colsum = invariant_colsum_np

else:
    epipolar_residuals = epipolar_residuals_np
    line_residuals = line_residuals_np
    hard_counts = hard_counts_np
    soft_scores = soft_scores_np
    dense = dense_np
    invariant_colsum = invariant_colsum_np


def epipolar_distances(models, corrs):
    """Square root of ``epipolar_residuals``: the first-order distance that thresholds compare against."""
    return np.sqrt(epipolar_residuals(models, corrs))

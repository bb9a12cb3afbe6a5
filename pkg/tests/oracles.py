"""Independent reference computations used by the tests.

Nothing here imports the package: each oracle works from first principles
(central differences, brute-force pair counting, closed forms).
"""

import math

import numpy as np

FD_STEP = 1e-5


def numerical_grad(f, x, eps=FD_STEP):
    """Central-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f(x)
        x[i] = old - eps
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def numerical_jacobian(f, x, eps=FD_STEP):
    """Central-difference Jacobian of ``f: R^n -> R^m`` at flat ``x``; returns (m, n)."""
    x = np.array(x, dtype=np.float64).ravel()
    cols = []
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        cols.append((np.ravel(f(xp)) - np.ravel(f(xm))) / (2 * eps))
    return np.stack(cols, axis=1)


def log_abs_det(m):
    sign, val = np.linalg.slogdet(m)
    assert sign != 0
    return val


def rel_err(actual, expected):
    """Max abs error relative to the largest magnitude of ``expected``."""
    actual, expected = np.asarray(actual, float), np.asarray(expected, float)
    scale = max(float(np.max(np.abs(expected))), 1e-12)
    return float(np.max(np.abs(actual - expected))) / scale


def mann_whitney_auc(pos, neg):
    """P(pos > neg) + 0.5 P(pos == neg) by counting every pair."""
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def gaussian_logpdf(x, mean, var):
    return -0.5 * math.log(2 * math.pi * var) - (x - mean) ** 2 / (2 * var)


def haar_block(a, b, c, d):
    """Orthonormal Haar of one 2x2 block [[a, b], [c, d]]."""
    return ((a + b + c + d) / 2, (a + b - c - d) / 2, (a - b + c - d) / 2, (a - b - c + d) / 2)

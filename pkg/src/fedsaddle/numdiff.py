"""Central finite differences on flattened coordinates."""

from __future__ import annotations

import numpy as np


def fd_gradient(f, x, step=1e-5):
    """Central-difference gradient of a scalar function of a flat vector."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        g[i] = (f(x + e) - f(x - e)) / (2.0 * step)
    return g


def fd_hessian_from_grad(grad, x, step=1e-5):
    """Central differences of a gradient function, symmetrized."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    H = np.zeros((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = step
        H[:, j] = (grad(x + e) - grad(x - e)) / (2.0 * step)
    return 0.5 * (H + H.T)


def fd_hessian_from_loss(f, x, step=1e-4):
    """Second central differences of a scalar function, symmetrized."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    H = np.zeros((n, n))
    fx = f(x)
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = step
        H[i, i] = (f(x + ei) - 2.0 * fx + f(x - ei)) / step**2
        for j in range(i + 1, n):
            ej = np.zeros(n)
            ej[j] = step
            v = (
                f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)
            ) / (4.0 * step**2)
            H[i, j] = v
            H[j, i] = v
    return 0.5 * (H + H.T)


def min_eigenvalue(H) -> float:
    """Smallest eigenvalue of a symmetric matrix (dense solve)."""
    return float(np.linalg.eigvalsh(np.asarray(H))[0])

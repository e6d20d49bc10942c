"""Shared brute-force oracles for the projection-related tests."""

import numpy as np
from scipy.optimize import nnls

from arbsurf.grid import quadrature_matrix
from arbsurf.projection import _second_difference_matrix


def full_cone_matrix(grid, nonneg=True):
    n_tau, n_K = grid.shape
    rows = []
    for j in range(n_K):
        for i in range(n_tau - 1):
            r = np.zeros((n_tau, n_K))
            r[i + 1, j] = 1.0
            r[i, j] = -1.0
            rows.append(r.ravel())
    A2 = _second_difference_matrix(grid.strikes)
    for i in range(n_tau):
        for q in range(A2.shape[0]):
            r = np.zeros((n_tau, n_K))
            r[i, :] = A2[q]
            rows.append(r.ravel())
    if nonneg:
        rows.extend(np.eye(n_tau * n_K))
    return np.asarray(rows)


def nnls_cone_projection_full(y, grid, w, nonneg=True):
    """Exact weighted projection onto the full arbitrage cone by dual NNLS."""
    omega = (w.w * quadrature_matrix(grid)).ravel()
    A = full_cone_matrix(grid, nonneg)
    B = A.T / np.sqrt(omega)[:, None]
    mu, _ = nnls(B, -np.sqrt(omega) * np.asarray(y, float).ravel(),
                 maxiter=50 * A.shape[0])
    return (np.asarray(y, float).ravel() + (A.T @ mu) / omega).reshape(y.shape)

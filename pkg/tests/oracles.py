"""Independent reference implementations used only by the tests.

Everything here works with dense m x m matrices and brute-force grids, so it
shares no code path with the package beyond numpy itself.
"""

from __future__ import annotations

import numpy as np


def dense_reml_loglik(y, D, X, A):
    """Residual log-likelihood from explicit V, P matrices (no 2 pi constant)."""
    y, D, X = np.asarray(y, float), np.asarray(D, float), np.atleast_2d(np.asarray(X, float))
    if X.shape[0] != y.size:
        X = X.T
    V = np.diag(A + D)
    Vi = np.linalg.inv(V)
    F = X.T @ Vi @ X
    P = Vi - Vi @ X @ np.linalg.inv(F) @ X.T @ Vi
    return -0.5 * (np.linalg.slogdet(V)[1] + np.linalg.slogdet(F)[1] + y @ P @ y)


def dense_reml_batch(y, D, X, A):
    """``dense_reml_loglik`` over a vector of A values, with batched dense matrices."""
    y, D = np.asarray(y, float), np.asarray(D, float)
    X = np.asarray(X, float).reshape(y.size, -1)
    A = np.asarray(A, float)
    out = np.empty(A.size)
    for s in range(0, A.size, 20_000):
        a = A[s:s + 20_000]
        V = np.zeros((a.size, y.size, y.size))
        idx = np.arange(y.size)
        V[:, idx, idx] = a[:, None] + D[None, :]
        Vi = np.linalg.inv(V)
        F = np.swapaxes(X, 0, 1)[None] @ Vi @ X[None]
        Fi = np.linalg.inv(F)
        P = Vi - Vi @ X[None] @ Fi @ np.swapaxes(X, 0, 1)[None] @ Vi
        quad = np.einsum("i,kij,j->k", y, P, y)
        out[s:s + a.size] = -0.5 * (np.linalg.slogdet(V)[1] + np.linalg.slogdet(F)[1] + quad)
    return out


def dense_beta(y, D, X, A):
    X = np.asarray(X, float).reshape(len(y), -1)
    Vi = np.diag(1.0 / (A + np.asarray(D, float)))
    F = X.T @ Vi @ X
    return np.linalg.solve(F, X.T @ Vi @ np.asarray(y, float)), np.linalg.inv(F)


def riemann_posterior(y, D, X, log_prior, area, n_nodes=200_000, lo=1e-9, hi=1e9):
    """Posterior moments by the trapezoid rule on a log-spaced A grid.

    ``log_prior(A)`` is the log prior density of A (vectorised). The
    integration variable is ``t = log A`` so the Jacobian ``A`` is included.
    Returns ``(e_b, v_b, e_theta, v_theta)`` for area ``area``.
    """
    y, D = np.asarray(y, float), np.asarray(D, float)
    X = np.asarray(X, float).reshape(y.size, -1)
    t = np.linspace(np.log(lo), np.log(hi), n_nodes)
    A = np.exp(t)
    lp = dense_reml_batch(y, D, X, A) + log_prior(A) + t
    w = np.exp(lp - lp.max())
    B = D[area] / (A + D[area])
    blup = np.empty(A.size)
    g12 = np.empty(A.size)
    for k in range(0, A.size, 20_000):
        a = A[k:k + 20_000]
        W = 1.0 / (a[:, None] + D[None, :])
        F = np.einsum("ki,ip,iq->kpq", W, X, X)
        Fi = np.linalg.inv(F)
        beta = np.einsum("kpq,kq->kp", Fi, (W * y) @ X)
        b = B[k:k + 20_000]
        blup[k:k + a.size] = (1 - b) * y[area] + b * (beta @ X[area])
        g12[k:k + a.size] = a * b + b**2 * np.einsum("p,kpq,q->k", X[area], Fi, X[area])
    Z = np.trapezoid(w, t)
    e_b = np.trapezoid(w * B, t) / Z
    v_b = np.trapezoid(w * B**2, t) / Z - e_b**2
    e_th = np.trapezoid(w * blup, t) / Z
    v_th = np.trapezoid(w * (g12 + blup**2), t) / Z - e_th**2
    return e_b, v_b, e_th, v_th


def balanced_fisher_inverse(m, n, sv, se):
    """Inverse of the balanced nested-error Fisher information, built from the information matrix.

    For n units in each of m areas with L = n sv + se the information for
    (sv, se) is 1/2 * [[m n^2/L^2, m n/L^2], [m n/L^2, m((n-1)/se^2 + 1/L^2)]].
    """
    L = n * sv + se
    info = 0.5 * np.array([[m * n**2 / L**2, m * n / L**2],
                           [m * n / L**2, m * ((n - 1) / se**2 + 1 / L**2)]])
    return np.linalg.inv(info)


def dense_nerm_information(n, sv, se):
    """Fisher information of (sv, se) from 1/2 tr(V^-1 dV_j V^-1 dV_k), summed over areas."""
    info = np.zeros((2, 2))
    for ni in np.asarray(n, dtype=int):
        J = np.ones((ni, ni))
        Vi = np.linalg.inv(se * np.eye(ni) + sv * J)
        dV = (J, np.eye(ni))
        for j in range(2):
            for k in range(2):
                info[j, k] += 0.5 * np.trace(Vi @ dV[j] @ Vi @ dV[k])
    return info

"""Independent reference solvers for tiny instances.

These are deliberately brute force and share no code with the package's
solvers, only the problem data.
"""

from __future__ import annotations

import itertools

import numpy as np
from scipy import special


# =============================================================================
# BALANCE QP: ENUMERATE ACTIVE SETS
# =============================================================================


def qp_active_set_oracle(A, b, eta, M):
    """Exact minimiser of ``||mu||^2`` s.t. ``|b - A mu| <= eta``, ``|mu| <= M``.

    Enumerates every assignment of each slab row to {free, lower, upper} and
    each coordinate to {free, -M, +M}, solves the equality-constrained
    min-norm problem, and keeps the best feasible candidate. Returns ``None``
    when no candidate is feasible.
    """
    A = np.asarray(A, float)
    b = np.asarray(b, float)
    p, n = A.shape
    best, best_val = None, np.inf
    for rows in itertools.product((0, -1, 1), repeat=p):
        for cols in itertools.product((0, -1, 1), repeat=n):
            mu = np.zeros(n)
            fixed = np.array([c != 0 for c in cols])
            mu[fixed] = M * np.array([c for c in cols if c != 0], float)
            act = [k for k in range(p) if rows[k] != 0]
            free = ~fixed
            if act and free.any():
                rhs = np.array([b[k] + rows[k] * eta for k in act]) - A[np.ix_(act, fixed)] @ mu[fixed]
                sol, *_ = np.linalg.lstsq(A[np.ix_(act, free)], rhs, rcond=None)
                mu[free] = sol
            if np.max(np.abs(b - A @ mu)) > eta + 1e-10 or np.max(np.abs(mu)) > M + 1e-10:
                continue
            val = mu @ mu
            if val < best_val - 1e-14:
                best, best_val = mu, val
    return best


# =============================================================================
# PROPENSITY PROGRAM: GRID SEARCH
# =============================================================================


def _ps_feasible(grid, X_tilde, T, G, tol, M_pi, kind="ate", eta_pi1=0.0):
    eta = grid @ X_tilde.T
    n = X_tilde.shape[0]
    if kind == "ate":
        pi = special.expit(eta)
        w = T / pi - 1.0
    else:
        pi = eta
        w = T - pi
    m = w @ G / n
    ok = np.all(np.abs(m) <= tol, axis=1)
    if kind == "ate":
        ratio = np.where(T > 0, T / pi, 0.0)
        return ok & (ratio.max(axis=1) <= M_pi)
    ok &= np.abs(pi).max(axis=1) <= M_pi
    ok &= (w * w).mean(axis=1) >= 1.0 / M_pi
    ok &= np.abs((w * pi).mean(axis=1)) <= eta_pi1 * np.linalg.norm(pi, axis=1) / np.sqrt(n)
    return ok


def ps_grid_oracle(X_tilde, T, G, tol, M_pi, anchor, lo=-3.0, hi=3.0, step=0.1,
                   refine_top=20, refine_half=0.1, refine_step=0.005, kind="ate", eta_pi1=0.0):
    """Smallest ``||gamma - anchor||_1`` over feasible points of a grid.

    ``kind="ate"`` uses the logistic link and weights ``T / pi - 1``;
    ``kind="plm"`` the identity link, weights ``T - pi`` and the extra
    magnitude, variance and product constraints.

    A coarse grid on ``[lo, hi]^d`` is followed by fine grids around the
    ``refine_top`` best coarse points. Returns ``(gamma, objective)`` or
    ``(None, inf)``.
    """
    d = X_tilde.shape[1]
    axis = np.round(np.arange(lo, hi + step / 2, step), 10)
    best, best_obj = None, np.inf
    pool = []
    for head in itertools.product(axis, repeat=max(d - 3, 0)):
        tails = np.array(list(itertools.product(axis, repeat=min(d, 3))))
        grid = np.hstack([np.tile(np.array(head, float), (tails.shape[0], 1)), tails])
        ok = _ps_feasible(grid, X_tilde, T, G, tol, M_pi, kind, eta_pi1)
        if not ok.any():
            continue
        g = grid[ok]
        obj = np.abs(g - anchor).sum(axis=1)
        order = np.argsort(obj)[:refine_top]
        pool.extend((obj[i], g[i]) for i in order)
    pool.sort(key=lambda t: t[0])
    pool = pool[:refine_top]
    if pool:
        best_obj, best = pool[0]
    offs = np.arange(-refine_half, refine_half + refine_step / 2, refine_step)
    for _, centre in pool:
        for head in itertools.product(offs, repeat=max(d - 3, 0)):
            tails = np.array(list(itertools.product(offs, repeat=min(d, 3))))
            grid = centre + np.hstack([np.tile(np.array(head, float), (tails.shape[0], 1)), tails])
            ok = _ps_feasible(grid, X_tilde, T, G, tol, M_pi, kind, eta_pi1)
            if not ok.any():
                continue
            g = grid[ok]
            obj = np.abs(g - anchor).sum(axis=1)
            i = int(np.argmin(obj))
            if obj[i] < best_obj:
                best, best_obj = g[i], float(obj[i])
    return best, float(best_obj)


# =============================================================================
# PENALISED LOGISTIC REGRESSION: GRID SEARCH
# =============================================================================


def logistic_lasso_grid_oracle(X, y, lam, lo=-3.0, hi=3.0, step=0.01, refine_half=0.02,
                               refine_step=1e-4):
    """Grid minimiser of the penalised Bernoulli loss for a two-column design.

    Objective ``mean(log(1 + e^eta) - y eta) + lam * s_1 |b_1|`` with column 0
    unpenalised and ``s_1`` the root mean square of column 1.
    """
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    s1 = np.sqrt(np.mean(X[:, 1] ** 2))

    def objective(b0, b1):
        eta = b0[..., None] * X[:, 0] + b1[..., None] * X[:, 1]
        return (np.logaddexp(0.0, eta) - y * eta).mean(axis=-1) + lam * s1 * np.abs(b1)

    axis = np.arange(lo, hi + step / 2, step)
    B0, B1 = np.meshgrid(axis, axis, indexing="ij")
    f = objective(B0, B1)
    i, j = np.unravel_index(np.argmin(f), f.shape)
    offs = np.arange(-refine_half, refine_half + refine_step / 2, refine_step)
    R0, R1 = np.meshgrid(axis[i] + offs, axis[j] + offs, indexing="ij")
    f = objective(R0, R1)
    k, m = np.unravel_index(np.argmin(f), f.shape)
    return np.array([R0[k, m], R1[k, m]])

"""Trimmed propensity estimates and the outcome-regression calibration QP.

The calibrator solves

    minimise   (1/n) ||mu||_2^2
    subject to ||b - A mu||_inf <= eta_r,   ||mu||_inf <= M_r,

with ``A = X^T Pi / n`` on the main split and ``b`` the Pi-weighted residual
moment on the auxiliary split. The solver is a hand-written ADMM with
closed-form linear solves, followed by an active-set polish and a KKT
certificate.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.typing import NDArray
from scipy.optimize import linprog

from .core_types import Dataset, InvalidConfigError, Link, NumericError, TuningParams, eval_link_vector

SOLVER_TOL = 1e-8
ESCALATION_FACTOR = 1.5
MAX_ESCALATIONS = 10


# =============================================================================
# TRIMMED PROPENSITY
# =============================================================================


def trim_index(eta, M_gamma: float):
    """Clip a linear index to ``[-M_gamma, M_gamma]``."""
    if not M_gamma > 0:
        raise InvalidConfigError(f"M_gamma must be positive, got {M_gamma!r}")
    out = np.clip(eta, -M_gamma, M_gamma)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class TrimmedPs:
    pi_hat: NDArray
    index_trimmed: NDArray
    M_gamma_used: float


def estimate_pi_hat(X: NDArray, gamma_hat: NDArray, phi: Link, M_gamma: float) -> TrimmedPs:
    """Propensity ``phi(clip(X gamma_hat))`` with a record of which rows were clipped."""
    eta = np.asarray(X, dtype=float) @ np.asarray(gamma_hat, dtype=float)
    if not np.all(np.isfinite(eta)):
        raise NumericError("non-finite propensity index")
    trimmed = np.abs(eta) > M_gamma
    pi = eval_link_vector(phi, trim_index(eta, M_gamma))
    return TrimmedPs(pi, trimmed, float(M_gamma))


# =============================================================================
# QP INPUTS
# =============================================================================


@dataclass(frozen=True)
class QpInputs:
    """Ingredients of the balance QP.

    ``Pi`` and ``Pi_aux`` are the diagonals of the weighting matrices.
    ``pi_hat`` is ``None`` in the partially linear variant.
    """

    X: NDArray
    X_aux: NDArray
    Pi: NDArray
    Pi_aux: NDArray
    R_tilde_aux: NDArray
    r_hat: NDArray
    pi_hat: Optional[NDArray] = None
    trimmed_count: int = 0

    @property
    def A(self) -> NDArray:
        return self.X.T * self.Pi / self.X.shape[0]

    @property
    def b(self) -> NDArray:
        return self.X_aux.T @ (self.Pi_aux * self.R_tilde_aux) / self.X_aux.shape[0]


def build_qp_inputs(main: Dataset, aux: Dataset, beta_hat, gamma_hat, phi: Link, psi: Link,
                    M_gamma: float) -> QpInputs:
    """Weights ``phi'(X gamma_hat) / pi_hat`` and inverse-propensity residuals."""
    beta_hat = np.asarray(beta_hat, dtype=float)
    gamma_hat = np.asarray(gamma_hat, dtype=float)
    floor = float(phi.value(-M_gamma))

    def side(d: Dataset):
        ps = estimate_pi_hat(d.X, gamma_hat, phi, M_gamma)
        if np.any(ps.pi_hat < floor) or np.any(ps.pi_hat <= 0):
            raise NumericError("trimmed propensity below its floor")
        weight = phi.deriv(d.X @ gamma_hat) / ps.pi_hat
        r = eval_link_vector(psi, d.X @ beta_hat)
        return ps, weight, r

    ps, Pi, r_hat = side(main)
    ps_aux, Pi_aux, r_aux = side(aux)
    R_aux = aux.T / ps_aux.pi_hat * (aux.Y - r_aux)
    return QpInputs(main.X, aux.X, Pi, Pi_aux, R_aux, r_hat, ps.pi_hat,
                    int(ps.index_trimmed.sum()))


def build_qp_inputs_plm(main: Dataset, aux: Dataset, beta_hat, gamma_hat, tau_hat: float,
                        phi: Link, psi: Link) -> QpInputs:
    """Partially linear variant: weights ``phi'(X gamma_hat)``, residuals ``Y - T tau - r_hat``."""
    beta_hat = np.asarray(beta_hat, dtype=float)
    gamma_hat = np.asarray(gamma_hat, dtype=float)
    Pi = np.asarray(phi.deriv(main.X @ gamma_hat), dtype=float)
    Pi_aux = np.asarray(phi.deriv(aux.X @ gamma_hat), dtype=float)
    r_hat = eval_link_vector(psi, main.X @ beta_hat)
    r_aux = eval_link_vector(psi, aux.X @ beta_hat)
    R_aux = aux.Y - aux.T * tau_hat - r_aux
    return QpInputs(main.X, aux.X, Pi, Pi_aux, R_aux, r_hat)


# =============================================================================
# QP SOLVER
# =============================================================================


@dataclass(frozen=True)
class QpSolution:
    """Solution of ``min 0.5||mu||^2 s.t. lo <= A mu <= hi, |mu| <= M``.

    ``status`` is one of ``"optimal"``, ``"infeasible"``, ``"max_iter"``.
    ``kkt_residual`` is the largest of primal violation, stationarity,
    dual-sign violation and complementarity, all in the original units.
    """

    mu: NDArray
    y: NDArray
    w: NDArray
    status: str
    n_iter: int
    kkt_residual: float
    polished: bool


def _kkt_residual(A, lo, hi, M, mu, y, w) -> float:
    Amu = A @ mu
    prim = max(float(np.max(np.maximum(lo - Amu, 0.0) + np.maximum(Amu - hi, 0.0), initial=0.0)),
               float(np.max(np.abs(mu), initial=0.0)) - M)
    stat = float(np.max(np.abs(mu + A.T @ y + w), initial=0.0))
    # y > 0 pairs with the upper slab face, y < 0 with the lower one
    comp_y = np.where(y > 0, y * (hi - Amu), -y * (Amu - lo))
    comp_w = np.where(w > 0, w * (M - mu), -w * (mu + M))
    comp = max(float(np.max(np.abs(comp_y), initial=0.0)), float(np.max(np.abs(comp_w), initial=0.0)))
    return max(prim, stat, comp, 0.0)


def _polish(A, lo, hi, M, mu, y, w):
    """Solve the equality-constrained QP on the active set guessed from ADMM."""
    Amu = A @ mu
    up = (hi - Amu) < y
    dn = (Amu - lo) < -y
    bup = (M - mu) < w
    bdn = (mu + M) < -w
    S = up | dn
    B = bup | bdn
    F = ~B
    mu_p = np.zeros_like(mu)
    mu_p[bup] = M
    mu_p[bdn] = -M
    y_p = np.zeros_like(y)
    if S.any():
        rhs = np.where(up, hi, lo)[S] - A[np.ix_(S, B)] @ mu_p[B]
        A_SF = A[np.ix_(S, F)]
        mu_p[F] = np.linalg.lstsq(A_SF, rhs, rcond=None)[0]
        y_p[S] = -np.linalg.lstsq(A_SF.T, mu_p[F], rcond=None)[0] if F.any() else 0.0
    w_p = np.zeros_like(w)
    w_p[B] = -mu_p[B] - A[:, B].T @ y_p
    return mu_p, y_p, w_p


def solve_balance_qp(A: NDArray, lo: NDArray, hi: NDArray, M: float, tol: float = SOLVER_TOL,
                     max_iter: int = 20_000, polish: bool = True) -> QpSolution:
    """ADMM for ``min 0.5||mu||^2 s.t. lo <= A mu <= hi, ||mu||_inf <= M``.

    Slab rows are rescaled to unit norm internally. The x-update uses a thin
    SVD computed once, so the penalty ``rho`` adapts at no refactorisation
    cost. Primal infeasibility is detected from the dual-iterate difference.
    """
    A = np.asarray(A, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    m, n = A.shape
    zero = np.zeros(n)
    norms = np.linalg.norm(A, axis=1)
    dead = norms == 0
    if np.any(dead & ((lo > 0) | (hi < 0))):
        return QpSolution(zero, np.zeros(m), zero.copy(), "infeasible", 0, math.inf, False)
    keep = ~dead
    As = A[keep] / norms[keep, None]
    los, his = lo[keep] / norms[keep], hi[keep] / norms[keep]
    k = As.shape[0]
    if np.all(los <= 0) and np.all(his >= 0):
        return QpSolution(zero, np.zeros(m), zero.copy(), "optimal", 0, 0.0, False)

    _, s, Vt = np.linalg.svd(As, full_matrices=False)
    s2 = s * s
    sigma, alpha = 1e-6, 1.6
    rho = 0.1
    l_all = np.concatenate([los, np.full(n, -M)])
    u_all = np.concatenate([his, np.full(n, M)])

    def Cx(v):
        return np.concatenate([As @ v, v])

    def CTy(v):
        return As.T @ v[:k] + v[k:]

    def solve(rhs, rho):
        c = 1.0 + sigma + rho
        proj = Vt @ rhs
        return (rhs - Vt.T @ (proj * (rho * s2 / (c + rho * s2)))) / c

    x = zero.copy()
    z = np.clip(Cx(x), l_all, u_all)
    yv = np.zeros(k + n)
    eps = 1e-7
    status = "max_iter"
    it = 0
    for it in range(1, max_iter + 1):
        xt = solve(sigma * x + CTy(rho * z - yv), rho)
        zt = Cx(xt)
        x = alpha * xt + (1 - alpha) * x
        zr = alpha * zt + (1 - alpha) * z
        z_new = np.clip(zr + yv / rho, l_all, u_all)
        dy = rho * (zr - z_new)
        yv = yv + dy
        z = z_new
        if it % 10 == 0:
            Cxv = Cx(x)
            r_prim = np.max(np.abs(Cxv - z))
            CTyv = CTy(yv)
            r_dual = np.max(np.abs(x + CTyv))
            sc_p = max(np.max(np.abs(Cxv)), np.max(np.abs(z)), 1e-12)
            sc_d = max(np.max(np.abs(x)), np.max(np.abs(CTyv)), 1e-12)
            if r_prim <= eps * (1 + sc_p) and r_dual <= eps * (1 + sc_d):
                status = "optimal"
                break
            ndy = np.max(np.abs(dy))
            if ndy > 1e-12:
                cert = u_all @ np.maximum(dy, 0) + l_all @ np.minimum(dy, 0)
                if np.max(np.abs(CTy(dy))) <= 1e-9 * ndy and cert <= -1e-9 * ndy:
                    status = "infeasible"
                    break
            if it % 50 == 0:
                ratio = (r_prim / sc_p) / max(r_dual / sc_d, 1e-30)
                rho = float(np.clip(rho * math.sqrt(ratio), 1e-6, 1e6))

    def unscale(yk):
        y_full = np.zeros(m)
        y_full[keep] = yk[:k] / norms[keep]
        return y_full, yk[k:].copy()

    y_full, w = unscale(yv)
    if status == "infeasible":
        return QpSolution(x, y_full, w, status, it, math.inf, False)
    res = _kkt_residual(A, lo, hi, M, x, y_full, w)
    best = (x, y_full, w, res, False)
    if polish:
        mu_p, y_p, w_p = _polish(As, los, his, M, x, yv[:k], yv[k:])
        y_pf = np.zeros(m)
        y_pf[keep] = y_p / norms[keep]
        res_p = _kkt_residual(A, lo, hi, M, mu_p, y_pf, w_p)
        if res_p < res:
            best = (mu_p, y_pf, w_p, res_p, True)
    mu, y_full, w, res, pol = best
    if status == "optimal" and res > tol:
        status = "max_iter" if res > 1e-5 else status
    return QpSolution(mu, y_full, w, status, it, res, pol)


def min_feasible_eta(A: NDArray, b: NDArray, M: float) -> float:
    """Smallest ``eta`` with ``{mu : ||b - A mu||_inf <= eta, ||mu||_inf <= M}`` nonempty (LP)."""
    p, n = A.shape
    c = np.zeros(n + 1)
    c[-1] = 1.0
    ones = np.ones((p, 1))
    A_ub = np.block([[A, -ones], [-A, -ones]])
    b_ub = np.concatenate([b, -b])
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, bounds=[(-M, M)] * n + [(0, None)], method="highs")
    if res.status != 0:
        raise NumericError(f"feasibility LP failed: {res.message}")
    return float(res.x[-1])


# =============================================================================
# CALIBRATION
# =============================================================================


@dataclass(frozen=True)
class OrCalibration:
    mu: NDArray
    constraint_residual_inf: float
    eta_r_used: float
    feasible: bool
    objective: float
    escalations: int
    kkt_residual: float = 0.0
    n_iter: int = 0


def _residual(A, b, mu) -> float:
    return float(np.max(np.abs(b - A @ mu), initial=0.0))


def calibrate_or_arrays(A: NDArray, b: NDArray, eta_r: float, M_r: float,
                        tol: float = SOLVER_TOL) -> OrCalibration:
    """Min-norm calibrator with tolerance escalation when the slab misses the box."""
    if not (eta_r > 0 and M_r > 0):
        raise InvalidConfigError("eta_r and M_r must be positive")
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
        raise NumericError("non-finite QP inputs")
    n = A.shape[1]
    eta, esc, eta_min = float(eta_r), 0, None
    while True:
        sol = solve_balance_qp(A, b - eta, b + eta, M_r, tol=tol)
        if sol.status == "optimal":
            mu = sol.mu
            return OrCalibration(mu, _residual(A, b, mu), eta, True, float(mu @ mu) / n, esc,
                                 sol.kkt_residual, sol.n_iter)
        if eta_min is None:
            eta_min = min_feasible_eta(A, b, M_r)
        # skip multiples the LP already rules out
        esc += 1
        while eta_r * ESCALATION_FACTOR ** esc <= eta_min * (1 + 1e-6) and esc <= MAX_ESCALATIONS:
            esc += 1
        if esc > MAX_ESCALATIONS:
            esc = MAX_ESCALATIONS
            eta = eta_r * ESCALATION_FACTOR ** esc
            break
        eta = eta_r * ESCALATION_FACTOR ** esc
    warnings.warn("outcome calibration infeasible after escalation; using mu = 0", RuntimeWarning)
    zero = np.zeros(n)
    return OrCalibration(zero, _residual(A, b, zero), eta, False, 0.0, esc, math.inf, 0)


def calibrate_or(inputs: QpInputs, tuning: TuningParams) -> OrCalibration:
    """Solve the outcome calibration QP for the main split."""
    if tuning.eta_r is None or tuning.M_r is None:
        raise InvalidConfigError("tuning must carry eta_r and M_r (call with_defaults)")
    return calibrate_or_arrays(inputs.A, inputs.b, tuning.eta_r, tuning.M_r)


def oracle_mu(pi_star, r_star, r_hat, pi_hat) -> NDArray:
    """Feasible comparison point ``pi* (r* - r_hat) / pi_hat``."""
    pi_star, pi_hat = np.asarray(pi_star, float), np.asarray(pi_hat, float)
    if np.any(pi_star <= 0) or np.any(pi_hat <= 0):
        raise NumericError("oracle calibrator needs strictly positive propensities")
    return pi_star * (np.asarray(r_star, float) - np.asarray(r_hat, float)) / pi_hat


def oracle_mu_plm(pi_star, tau_star: float, tau_hat: float, r_star, r_hat) -> NDArray:
    """Partially linear analogue ``pi* (tau* - tau_hat) + r* - r_hat``."""
    return (np.asarray(pi_star, float) * (tau_star - tau_hat)
            + np.asarray(r_star, float) - np.asarray(r_hat, float))

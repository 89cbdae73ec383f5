"""Covariate augmentation and the l1-anchored propensity calibration program.

The program moves the propensity coefficients as little as possible in l1
while balancing three families of weighted moments and bounding the inverse
weights:

    minimise   ||gamma - gamma_hat||_1
    subject to |n^-1 sum_i w_i(gamma) g_ik| <= t_k      for every moment k,
               max_i T_i / pi_i(gamma) <= M_pi,

with ``w_i = T_i / pi_i - 1`` for a binary treatment and ``w_i = T_i - pi_i``
in the partially linear model (which adds its own bound, variance and
product constraints). The program is nonconvex in general. It is solved by
an augmented Lagrangian whose inner problems use accelerated proximal
gradient steps; every candidate is certified by direct evaluation at the
original tolerances, and if none passes the anchor ``gamma_hat`` is kept.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from .core_types import Dataset, InvalidConfigError, Link, NumericError, TuningParams, make_rng

SOLVER_TOL = 1e-10
MAX_ITER_PER_START = 5_000
MARGINS = (1e-2, 1e-3, 1e-4)
PERTURB_SD = 0.05

# group labels for the stacked moment columns
G_OUTCOME, G_MU, G_AUG = 1, 2, 3


# =============================================================================
# AUGMENTATION
# =============================================================================


@dataclass(frozen=True)
class AugmentedDesign:
    X_tilde: NDArray
    synth_seed: int
    n_synth: int


def augment_covariates(X: NDArray, seed: int) -> AugmentedDesign:
    """Append ``n - p`` Uniform[-1, 1] columns when ``p < n``; otherwise return ``X``."""
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    if n < 1:
        raise InvalidConfigError("need at least one row")
    k = max(0, n - p)
    if k == 0:
        return AugmentedDesign(X.copy(), int(seed), 0)
    Z = make_rng(seed, 0xA6).uniform(-1.0, 1.0, size=(n, k))
    return AugmentedDesign(np.hstack([X, Z]), int(seed), k)


def pad_gamma(gamma, width: int) -> NDArray:
    """Zero-pad a coefficient vector to ``width`` entries."""
    gamma = np.asarray(gamma, dtype=float)
    if gamma.size > width:
        raise InvalidConfigError("coefficient vector longer than the augmented design")
    out = np.zeros(width)
    out[:gamma.size] = gamma
    return out


# =============================================================================
# CONSTRAINT SYSTEM
# =============================================================================


@dataclass(frozen=True)
class PsProblem:
    """Moment matrix, tolerances and bounds of one calibration program.

    ``G`` holds one column per moment (outcome-weighted covariates, the
    calibrator direction, augmented covariates) and ``tol`` their tolerances;
    ``group`` labels each column. ``kind`` is ``"ate"`` or ``"plm"``.
    """

    X_tilde: NDArray
    T: NDArray
    phi: Link
    G: NDArray
    tol: NDArray
    group: NDArray
    M_pi: float
    anchor: NDArray
    kind: str = "ate"
    eta_pi1: float = 0.0

    @property
    def n(self) -> int:
        return self.X_tilde.shape[0]

    def index(self, gamma: NDArray) -> NDArray:
        return self.X_tilde @ gamma

    def weights(self, eta: NDArray) -> NDArray:
        pi = self.phi.value(eta)
        if self.kind == "ate":
            return self.T / pi - 1.0
        return self.T - pi

    def moments(self, eta: NDArray) -> NDArray:
        return self.G.T @ self.weights(eta) / self.n


def build_ps_problem(main: Dataset, aug: AugmentedDesign, beta_hat, gamma_hat, mu_hat, phi: Link,
                     psi: Link, tuning: TuningParams, kind: str = "ate") -> PsProblem:
    """Assemble the moment columns and their tolerances."""
    if tuning.eta_pi1 is None or tuning.eta_pi2 is None or tuning.M_pi is None:
        raise InvalidConfigError("tuning must carry eta_pi1, eta_pi2 and M_pi (call with_defaults)")
    if kind not in ("ate", "plm"):
        raise InvalidConfigError(f"unknown program kind {kind!r}")
    X, Xt = main.X, aug.X_tilde
    n, p = X.shape
    if Xt.shape[0] != n or not np.array_equal(Xt[:, :p], X):
        raise InvalidConfigError("augmented design does not extend the main covariates")
    mu_hat = np.asarray(mu_hat, dtype=float)
    sq = math.sqrt(n)
    dpsi = np.asarray(psi.deriv(X @ np.asarray(beta_hat, dtype=float)), dtype=float) * np.ones(n)
    G1 = dpsi[:, None] * X
    t1 = tuning.eta_pi1 * np.linalg.norm(G1, axis=0) / sq
    t3 = tuning.eta_pi2 * np.linalg.norm(Xt, axis=0) / sq
    cols, tols, groups = [G1], [t1], [np.full(p, G_OUTCOME)]
    mu_norm = float(np.linalg.norm(mu_hat))
    if mu_norm > 0:
        cols.append(mu_hat[:, None])
        tols.append(np.array([tuning.eta_pi1 * mu_norm / sq]))
        groups.append(np.array([G_MU]))
    cols.append(Xt)
    tols.append(t3)
    groups.append(np.full(Xt.shape[1], G_AUG))
    anchor = pad_gamma(gamma_hat, Xt.shape[1])
    return PsProblem(Xt, main.T.copy(), phi, np.hstack(cols), np.concatenate(tols),
                     np.concatenate(groups), float(tuning.M_pi), anchor, kind, float(tuning.eta_pi1))


# =============================================================================
# FEASIBILITY
# =============================================================================


@dataclass(frozen=True)
class FeasibilityReport:
    """Largest excess ``|moment| - tolerance`` per constraint family.

    Non-positive entries mean satisfied. ``constprop`` is the excess of the
    inverse-weight (ATE) or magnitude (PLM) bound. The PLM-only entries are
    ``nan`` for the ATE program.
    """

    const1: float
    const2: float
    constprop: float
    const3: float
    variance: float = math.nan
    product: float = math.nan
    feasible: bool = False

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("const1", "const2", "constprop", "const3", "variance", "product", "feasible")}


def _excess_by_group(m, tol, group, g) -> float:
    sel = group == g
    if not sel.any():
        return 0.0
    # a zero tolerance on an identically zero moment counts as satisfied
    return float(np.max(np.abs(m[sel]) - tol[sel]))


def feasibility_report(gamma, problem: PsProblem, tol: float = SOLVER_TOL) -> FeasibilityReport:
    """Recompute every constraint from scratch at ``gamma``."""
    gamma = np.asarray(gamma, dtype=float)
    eta = problem.index(gamma)
    if not np.all(np.isfinite(eta)):
        raise NumericError("non-finite propensity index")
    pi = problem.phi.value(eta)
    m = problem.moments(eta)
    e1 = _excess_by_group(m, problem.tol, problem.group, G_OUTCOME)
    e2 = _excess_by_group(m, problem.tol, problem.group, G_MU)
    e3 = _excess_by_group(m, problem.tol, problem.group, G_AUG)
    if problem.kind == "ate":
        with np.errstate(divide="ignore"):
            ratio = np.where(problem.T > 0, problem.T / pi, 0.0)
        eprop = float(np.max(ratio) - problem.M_pi)
        checks = (e1, e2, e3, eprop)
        return FeasibilityReport(e1, e2, eprop, e3, feasible=bool(max(checks) <= tol))
    n = problem.n
    w = problem.T - pi
    eprop = float(np.max(np.abs(pi)) - problem.M_pi)
    evar = 1.0 / problem.M_pi - float(w @ w) / n
    eprod = abs(float(w @ pi) / n) - problem.eta_pi1 * float(np.linalg.norm(pi)) / math.sqrt(n)
    checks = (e1, e2, e3, eprop, evar, eprod)
    return FeasibilityReport(e1, e2, eprop, e3, evar, eprod, feasible=bool(max(checks) <= tol))


# =============================================================================
# SOLVER
# =============================================================================


class _Lagrangian:
    """Augmented Lagrangian of the calibration program in the index space.

    All constraints are functions of the index ``eta = X_tilde gamma`` on the
    rows that move: treated rows for the ATE program (control rows contribute
    the constant weight -1), every row for the partially linear one.
    """

    def __init__(self, prob: PsProblem, margin: float = MARGINS[0]):
        self.prob = prob
        n = prob.n
        keep = prob.tol > 0
        Gs = prob.G[:, keep] / (n * prob.tol[keep])
        if prob.kind == "ate":
            rows = prob.T > 0
            self.offset = -Gs[~rows].sum(axis=0)
            self.Tr = prob.T[rows]
        else:
            rows = np.ones(n, dtype=bool)
            self.offset = np.zeros(Gs.shape[1])
            self.Tr = prob.T
        self.rows = rows
        self.Gs = np.ascontiguousarray(Gs[rows])
        self.Xr = np.ascontiguousarray(prob.X_tilde[rows])
        phi = prob.phi
        if prob.kind == "ate":
            # T / pi <= M_pi on treated rows is a lower bound on the index
            self.eta_lo = float(phi.inverse(1.0 / prob.M_pi)) + 1e-9
            self.eta_hi = math.inf
        else:
            self.eta_lo = float(phi.inverse(-prob.M_pi)) if phi.kind == "identity" else -math.inf
            self.eta_hi = float(phi.inverse(prob.M_pi)) if phi.kind == "identity" else math.inf
            if phi.kind == "identity":
                self.eta_lo *= 1 - 1e-9
                self.eta_hi *= 1 - 1e-9
        self.K = self.Gs.shape[1]
        self.set_margin(margin)

    def set_margin(self, margin: float) -> None:
        self.bound = 1.0 - margin
        self.prod_bound = 1.0 - margin
        # residual variance floor, written as 1 - M_pi * mean(w^2) <= -margin
        self.var_bound = -margin
        # below this tightened violation the original constraints may hold
        self.certify_below = 0.5 * margin

    def _w(self, eta):
        phi = self.prob.phi
        pi = phi.value(eta)
        d = phi.deriv(eta)
        if self.prob.kind == "ate":
            return self.Tr / pi - 1.0, -self.Tr * d / (pi * pi), pi, d
        return self.Tr - pi, -d, pi, d

    def _prod(self, w, pi, d):
        n = self.prob.n
        num = float(w @ pi) / n
        nrm = float(np.linalg.norm(pi))
        den = self.prob.eta_pi1 * nrm / math.sqrt(n)
        if den <= 0:
            return 0.0, np.zeros_like(pi)
        g = num / den
        dnum = d * (w - pi) / n
        dden = self.prob.eta_pi1 / math.sqrt(n) * pi * d / nrm
        return g, (dnum * den - num * dden) / (den * den)

    def evaluate(self, gamma, nu, kap, lam_p, rho, grad: bool = True):
        """Smooth penalty value, its gradient and the raw constraint values."""
        eta = self.Xr @ gamma
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            return self._evaluate(eta, nu, kap, lam_p, rho, grad)

    def _evaluate(self, eta, nu, kap, lam_p, rho, grad):
        w, dw, pi, d = self._w(eta)
        v = self.Gs.T @ w + self.offset
        s = v + nu / rho
        dm = s - np.clip(s, -self.bound, self.bound)
        si = eta + kap / rho
        di = si - np.clip(si, self.eta_lo, self.eta_hi)
        val = 0.5 * rho * (dm @ dm + di @ di)
        extra = (0.0, 0.0)
        if self.prob.kind == "plm":
            n, M = self.prob.n, self.prob.M_pi
            gp, gprod = self._prod(w, pi, d)
            sp = gp + lam_p[0] / rho
            dp = sp - min(max(sp, -self.prod_bound), self.prod_bound)
            cv = 1.0 - M * float(w @ w) / n
            dv = max(cv + lam_p[1] / rho - self.var_bound, 0.0)
            val += 0.5 * rho * (dp * dp + dv * dv)
            extra = (gp, cv)
        if not np.isfinite(val):
            return math.inf, None, (eta, v, extra)
        g = None
        if grad:
            geta = rho * (dw * (self.Gs @ dm) + di)
            if self.prob.kind == "plm":
                geta = geta + rho * (dp * gprod + dv * (2.0 * M / n) * w * d)
            g = self.Xr.T @ geta
        return val, g, (eta, v, extra)

    def multipliers(self, eta, v, extra, nu, kap, lam_p, rho):
        s = v + nu / rho
        nu = rho * (s - np.clip(s, -self.bound, self.bound))
        si = eta + kap / rho
        kap = rho * (si - np.clip(si, self.eta_lo, self.eta_hi))
        if self.prob.kind == "plm":
            gp, cv = extra
            sp = gp + lam_p[0] / rho
            lam_p = np.array([rho * (sp - min(max(sp, -self.prod_bound), self.prod_bound)),
                              max(rho * (cv - self.var_bound) + lam_p[1], 0.0)])
        return nu, kap, lam_p

    def violation(self, eta, v, extra) -> float:
        """Largest violation of the tightened constraints."""
        out = float(np.max(np.abs(v) - self.bound, initial=0.0))
        out = max(out, float(np.max(self.eta_lo - eta, initial=0.0)),
                  float(np.max(eta - self.eta_hi, initial=0.0)))
        if self.prob.kind == "plm":
            gp, cv = extra
            out = max(out, abs(gp) - self.prod_bound, cv - self.var_bound)
        return max(out, 0.0)


def _soft(v, t):
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


@dataclass
class _Run:
    best: Optional[NDArray] = None
    best_obj: float = math.inf
    n_iter: int = 0


def _fista(lag: _Lagrangian, anchor, x, nu, kap, lam_p, rho, L, inner_tol, budget, consider):
    """Accelerated proximal gradient on penalty + l1 with backtracking and restarts."""
    y = x.copy()
    t = 1.0
    F_prev = math.inf
    fy, gy, _ = lag.evaluate(y, nu, kap, lam_p, rho)
    if gy is None:
        return x, L, math.inf, 0
    step, used = math.inf, 0
    while used < budget:
        used += 1
        while True:
            xn = anchor + _soft(y - gy / L - anchor, 1.0 / L)
            fx, _, aux = lag.evaluate(xn, nu, kap, lam_p, rho, grad=False)
            dx = xn - y
            with np.errstate(over="ignore", invalid="ignore"):
                bound = fy + gy @ dx + 0.5 * L * (dx @ dx) + 1e-12 * abs(fy)
            if fx <= bound or L > 1e14:
                break
            L *= 2.0
        Fx = fx + float(np.abs(xn - anchor).sum())
        if lag.violation(*aux) <= lag.certify_below:
            consider(xn)
        step = L * float(np.max(np.abs(dx)))
        if not Fx <= F_prev:
            # restart momentum from the last accepted iterate
            t = 1.0
            y = x.copy()
            fy, gy, _ = lag.evaluate(y, nu, kap, lam_p, rho)
            F_prev = math.inf
            if gy is None:
                break
            continue
        tn = 0.5 * (1 + math.sqrt(1 + 4 * t * t))
        y = xn + ((t - 1) / tn) * (xn - x)
        x, t, F_prev = xn, tn, Fx
        fy, gy, _ = lag.evaluate(y, nu, kap, lam_p, rho)
        if gy is None:
            y, t = x.copy(), 1.0
            fy, gy, _ = lag.evaluate(y, nu, kap, lam_p, rho)
            if gy is None:
                break
        L *= 0.95
        if step <= inner_tol:
            break
    return x, L, step, used


def _run_start(lag: _Lagrangian, prob: PsProblem, gamma0: NDArray, max_iter: int,
               trace: Optional[list] = None) -> _Run:
    """Augmented-Lagrangian solve from one start.

    The constraints are tightened by a margin that shrinks over successive
    stages, so iterates approach the boundary from inside and every stage
    can yield certified points.
    """
    anchor = prob.anchor
    run = _Run()

    def consider(x):
        obj = float(np.abs(x - anchor).sum())
        if obj < run.best_obj and feasibility_report(x, prob).feasible:
            run.best, run.best_obj = x.copy(), obj

    nu = np.zeros(lag.K)
    kap = np.zeros(lag.Xr.shape[0])
    lam_p = np.zeros(2)
    rho = 1.0
    x = np.asarray(gamma0, dtype=float).copy()
    L = 1.0
    it = 0
    for margin in MARGINS:
        lag.set_margin(margin)
        viol_prev = math.inf
        inner_tol = 1e-3
        while it < max_iter:
            x, L, step, used = _fista(lag, anchor, x, nu, kap, lam_p, rho, L, inner_tol,
                                      max_iter - it, consider)
            it += max(used, 1)
            _, _, aux = lag.evaluate(x, nu, kap, lam_p, rho, grad=False)
            viol = lag.violation(*aux)
            if not np.isfinite(viol):
                run.n_iter = it
                return run
            if viol <= lag.certify_below:
                consider(x)
            if trace is not None:
                trace.append((it, margin, rho, L, viol, float(np.abs(x - anchor).sum()), step,
                              run.best_obj))
            nu, kap, lam_p = lag.multipliers(*aux, nu, kap, lam_p, rho)
            if viol <= 1e-9 and step <= 1e-6:
                break
            if viol > 1e-9 and viol > 0.25 * viol_prev:
                rho = min(rho * 5.0, 1e8)
            viol_prev = viol
            inner_tol = max(inner_tol * 0.2, 1e-7)
        if run.best is None:
            # no certified point at this margin: a thinner one will not help
            break
    run.n_iter = it
    return run


@dataclass(frozen=True)
class PsCalibration:
    gamma_tilde: NDArray
    pi_tilde: NDArray
    feasible: bool
    fell_back: bool
    constraint_report: FeasibilityReport
    objective: float
    n_iter: int = 0
    start_index: int = -1


def solve_ps_problem(prob: PsProblem, seed: int = 0, max_iter: int = MAX_ITER_PER_START,
                     starts: Optional[Sequence[NDArray]] = None) -> PsCalibration:
    """Multi-start solve with certification and anchor fallback.

    Winner: smallest l1 objective among certified points, ties broken by the
    lower start index.
    """
    anchor = prob.anchor
    rep0 = feasibility_report(anchor, prob)
    if rep0.feasible:
        return PsCalibration(anchor.copy(), prob.phi.value(prob.index(anchor)), True, False, rep0,
                             0.0, 0, 0)
    if starts is None:
        pert = make_rng(seed, 0xB7).normal(0.0, PERTURB_SD, anchor.size)
        starts = [anchor, np.zeros_like(anchor), anchor + pert]
    lag = _Lagrangian(prob)
    best, best_obj, best_k, total = None, math.inf, -1, 0
    for k, g0 in enumerate(starts):
        run = _run_start(lag, prob, np.asarray(g0, dtype=float), max_iter)
        total += run.n_iter
        if run.best is not None and run.best_obj < best_obj:
            best, best_obj, best_k = run.best, run.best_obj, k
    if best is None:
        return PsCalibration(anchor.copy(), prob.phi.value(prob.index(anchor)), False, True, rep0,
                             0.0, total, -1)
    rep = feasibility_report(best, prob)
    return PsCalibration(best, prob.phi.value(prob.index(best)), True, False, rep, best_obj,
                         total, best_k)


def calibrate_ps(main: Dataset, aug: AugmentedDesign, beta_hat, gamma_hat, mu_hat, phi: Link,
                 psi: Link, tuning: TuningParams, seed: int = 0,
                 max_iter: int = MAX_ITER_PER_START) -> PsCalibration:
    """Calibrate the propensity coefficients for the treatment-mean estimator."""
    prob = build_ps_problem(main, aug, beta_hat, gamma_hat, mu_hat, phi, psi, tuning, "ate")
    return solve_ps_problem(prob, seed, max_iter)


def calibrate_ps_plm(main: Dataset, aug: AugmentedDesign, beta_hat, gamma_hat, mu_hat, phi: Link,
                     psi: Link, tuning: TuningParams, seed: int = 0,
                     max_iter: int = MAX_ITER_PER_START) -> PsCalibration:
    """Partially linear variant with residual ``T - pi`` and the extra bounds."""
    prob = build_ps_problem(main, aug, beta_hat, gamma_hat, mu_hat, phi, psi, tuning, "plm")
    return solve_ps_problem(prob, seed, max_iter)

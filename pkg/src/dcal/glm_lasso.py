"""l1-penalised GLM fitting for the nuisance coefficients.

The smooth part is ``(1/n) sum loss(eta_i; y_i)`` with

* identity link: ``loss = (y - eta)^2 / 2``,
* logistic link: the Bernoulli negative log-likelihood,
* probit link: ``(y - Phi(eta))^2 / 2`` (nonlinear least squares on the mean),

and the penalty is ``lam * sum_j pf_j |b_j|`` on internally standardised
columns (unit empirical second moment). Column 0 is the intercept and is never
penalised. Each outer step minimises a quadratic model of the smooth part by
cyclic coordinate descent with active-set screening, then a backtracking step
on the true objective keeps the iterates monotone.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from numba import njit
from numpy.typing import NDArray
from scipy import special

from .core_types import DataError, Dataset, InvalidConfigError, Link, make_rng

MAX_SWEEPS = 10_000
COEF_TOL = 1e-9
CV_COEF_TOL = 1e-6
N_LAMBDA = 50
LAMBDA_MIN_RATIO = 1e-3
RESPONSES = ("outcome_on_treated", "treatment", "outcome_all")


def kkt_tolerance(lam: float) -> float:
    return 1e-6 * (1.0 + lam)


@dataclass(frozen=True)
class NuisanceFit:
    """Fitted coefficients on the original covariate scale.

    ``kkt_max_violation`` is measured on the standardised scale, where the
    penalty is a plain l1 norm.
    """

    coef: NDArray
    link: Link
    lam: float
    n_iter: int
    converged: bool
    kkt_max_violation: float
    objective: float
    response: str = ""

    def index(self, X: NDArray) -> NDArray:
        return X @ self.coef

    def predict(self, X: NDArray) -> NDArray:
        return self.link.value(X @ self.coef)

    @property
    def support(self) -> NDArray:
        return np.flatnonzero(self.coef[1:] != 0.0) + 1


# =============================================================================
# KERNEL
# =============================================================================


@njit(cache=True)
def _weighted_cd(X, z, w, pen, lam, b, max_sweeps, tol):
    """Minimise (1/2n) sum w_i (z_i - x_i'b)^2 + lam sum pen_j |b_j| in place.

    Returns (sweeps used, converged flag).
    """
    n, p = X.shape
    r = z.copy()
    for j in range(p):
        bj = b[j]
        if bj != 0.0:
            for i in range(n):
                r[i] -= X[i, j] * bj
    xwx = np.zeros(p)
    for j in range(p):
        s = 0.0
        for i in range(n):
            s += w[i] * X[i, j] * X[i, j]
        xwx[j] = s / n
    active = np.zeros(p, dtype=np.bool_)
    full = True
    sweeps = 0
    while sweeps < max_sweeps:
        sweeps += 1
        dmax = 0.0
        for j in range(p):
            if not full and not active[j]:
                continue
            if xwx[j] <= 0.0:
                continue
            bj = b[j]
            g = 0.0
            for i in range(n):
                g += w[i] * X[i, j] * r[i]
            g = g / n + xwx[j] * bj
            thr = lam * pen[j]
            if g > thr:
                nb = (g - thr) / xwx[j]
            elif g < -thr:
                nb = (g + thr) / xwx[j]
            else:
                nb = 0.0
            d = nb - bj
            if d != 0.0:
                for i in range(n):
                    r[i] -= d * X[i, j]
                b[j] = nb
                if abs(d) > dmax:
                    dmax = abs(d)
            if nb != 0.0:
                active[j] = True
        if full:
            if dmax < tol:
                return sweeps, True
            full = False
        elif dmax < tol:
            full = True
    return sweeps, False


# =============================================================================
# LOSSES
# =============================================================================


def _loss_terms(kind: str, eta: NDArray, y: NDArray):
    """Per-observation (loss, d loss / d eta, curvature, working-response shift)."""
    if kind == "identity":
        resid = eta - y
        return 0.5 * resid ** 2, resid, np.ones_like(eta)
    if kind == "logistic":
        pr = special.expit(eta)
        loss = np.logaddexp(0.0, eta) - y * eta
        return loss, pr - y, np.maximum(pr * (1.0 - pr), 1e-8)
    if kind == "probit":
        mu = special.ndtr(eta)
        dens = np.exp(-0.5 * eta ** 2) / np.sqrt(2.0 * np.pi)
        resid = y - mu
        return 0.5 * resid ** 2, -resid * dens, np.maximum(dens ** 2, 1e-12)
    raise InvalidConfigError(f"lasso fitting does not support link {kind!r}")


def _objective(kind, Xs, y, b, lam, pen) -> float:
    loss = _loss_terms(kind, Xs @ b, y)[0]
    return float(loss.mean() + lam * np.sum(pen * np.abs(b)))


def _gradient(kind, Xs, y, b) -> NDArray:
    return Xs.T @ _loss_terms(kind, Xs @ b, y)[1] / Xs.shape[0]


def kkt_violation(kind, Xs, y, b, lam, pen) -> float:
    """Largest violation of the lasso stationarity conditions (standardised scale)."""
    g = _gradient(kind, Xs, y, b)
    thr = lam * pen
    nz = b != 0.0
    v = np.where(nz, np.abs(g + thr * np.sign(b)), np.maximum(np.abs(g) - thr, 0.0))
    return float(v.max()) if v.size else 0.0


# =============================================================================
# SOLVER
# =============================================================================


@dataclass
class _Problem:
    kind: str
    Xs: NDArray
    y: NDArray
    pen: NDArray
    scale: NDArray


def _standardise(X: NDArray, y: NDArray, kind: str, penalty_factor=None) -> _Problem:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    scale = np.sqrt(np.mean(X ** 2, axis=0))
    scale[scale == 0.0] = 1.0
    scale[0] = 1.0
    Xs = np.asfortranarray(X / scale)
    pen = np.ones(X.shape[1]) if penalty_factor is None else np.asarray(penalty_factor, dtype=float)
    pen = pen.copy()
    pen[0] = 0.0
    return _Problem(kind, Xs, y, pen, scale)


def _solve(prob: _Problem, lam: float, b0: Optional[NDArray] = None, max_sweeps: int = MAX_SWEEPS,
           tol: float = COEF_TOL, trace: Optional[list] = None):
    """Proximal-Newton outer loop; returns (b_std, sweeps, converged)."""
    kind, Xs, y, pen = prob.kind, prob.Xs, prob.y, prob.pen
    n, p = Xs.shape
    b = np.zeros(p) if b0 is None else np.array(b0, dtype=float)
    if b0 is None and kind != "identity":
        ybar = float(np.clip(y.mean(), 1e-6, 1 - 1e-6))
        if kind == "logistic" and 0.0 < y.mean() < 1.0:
            b[0] = special.logit(ybar)
        elif kind == "probit" and 0.0 < y.mean() < 1.0:
            b[0] = special.ndtri(ybar)
    f = _objective(kind, Xs, y, b, lam, pen)
    if trace is not None:
        trace.append(f)
    sweeps = 0
    converged = False
    inner_tol = tol if kind == "identity" else max(tol, 1e-4)
    for _ in range(200):
        eta = Xs @ b
        _, grad, curv = _loss_terms(kind, eta, y)
        z = eta - grad / curv
        b_new = b.copy()
        used, inner_ok = _weighted_cd(Xs, z, curv, pen, lam, b_new, max(max_sweeps - sweeps, 1), inner_tol)
        sweeps += used
        step = b_new - b
        if kind == "identity":
            b = b_new
            f = _objective(kind, Xs, y, b, lam, pen)
            if trace is not None:
                trace.append(f)
            converged = inner_ok
            break
        t = 1.0
        while True:
            cand = b + t * step
            f_new = _objective(kind, Xs, y, cand, lam, pen)
            if f_new <= f + 1e-12 * (1.0 + abs(f)) or t < 1e-10:
                break
            t *= 0.5
        if f_new > f:
            cand, f_new = b, f
        change = float(np.max(np.abs(cand - b))) if p else 0.0
        b, f = cand, f_new
        if trace is not None:
            trace.append(f)
        if change < tol and inner_ok and inner_tol <= tol:
            converged = True
            break
        inner_tol = max(tol, min(inner_tol, 0.01 * change))
        if sweeps >= max_sweeps:
            break
    return b, sweeps, converged


def fit_penalized(X: NDArray, y: NDArray, link: Link, lam: float, penalty_factor=None,
                  coef0: Optional[NDArray] = None, max_sweeps: int = MAX_SWEEPS,
                  response: str = "") -> NuisanceFit:
    """Fit an l1-penalised GLM on raw design ``X`` (column 0 = intercept)."""
    if lam < 0 or not np.isfinite(lam):
        raise InvalidConfigError(f"lambda must be a finite non-negative number, got {lam!r}")
    prob = _standardise(X, y, link.kind, penalty_factor)
    b0 = None if coef0 is None else np.asarray(coef0, dtype=float) * prob.scale
    b, sweeps, converged = _solve(prob, lam, b0, max_sweeps)
    kkt = kkt_violation(prob.kind, prob.Xs, prob.y, b, lam, prob.pen)
    if kkt > kkt_tolerance(lam):
        converged = False
    return NuisanceFit(
        coef=b / prob.scale, link=link, lam=float(lam), n_iter=sweeps, converged=converged,
        kkt_max_violation=kkt, objective=_objective(prob.kind, prob.Xs, prob.y, b, lam, prob.pen),
        response=response,
    )


def response_data(train: Dataset, response: str):
    """Rows and response vector used for each nuisance fit."""
    if response == "outcome_on_treated":
        rows = train.T == 1.0
        if rows.sum() < 10:
            raise DataError(f"need at least 10 treated rows to fit the outcome model, got {int(rows.sum())}")
        return train.X[rows], train.Y[rows]
    if response == "treatment":
        return train.X, train.T
    if response == "outcome_all":
        return train.X, train.Y
    raise InvalidConfigError(f"unknown response {response!r}; expected one of {RESPONSES}")


def fit_lasso_glm(train: Dataset, response: str, link: Link, lam: float) -> NuisanceFit:
    """Fit the outcome (``outcome_on_treated``/``outcome_all``) or PS (``treatment``) model."""
    X, y = response_data(train, response)
    return fit_penalized(X, y, link, lam, response=response)


# =============================================================================
# PATHS AND CROSS-VALIDATION
# =============================================================================


def lambda_max(X: NDArray, y: NDArray, penalty_factor=None) -> float:
    """Smallest lambda with all penalised (standardised) coefficients at zero.

    Exact for the identity and logistic links when only the intercept is
    unpenalised.
    """
    prob = _standardise(X, y, "identity", penalty_factor)
    yc = prob.y - prob.y.mean()
    free = prob.pen == 0.0
    if free.sum() > 1:
        Xf = prob.Xs[:, free]
        coef, *_ = np.linalg.lstsq(Xf, prob.y, rcond=None)
        yc = prob.y - Xf @ coef
    g = np.abs(prob.Xs.T @ yc) / prob.Xs.shape[0]
    g[free] = 0.0
    return float(g.max())


def lambda_grid(X: NDArray, y: NDArray, penalty_factor=None, n_lambda: int = N_LAMBDA,
                min_ratio: float = LAMBDA_MIN_RATIO) -> NDArray:
    lmax = lambda_max(X, y, penalty_factor)
    if lmax <= 0:
        raise DataError("response is degenerate (no variation left to explain)")
    return lmax * np.geomspace(1.0, min_ratio, n_lambda)


def lasso_path(X: NDArray, y: NDArray, link: Link, lambdas: Sequence[float], penalty_factor=None,
               max_sweeps: int = MAX_SWEEPS, max_dev_ratio: Optional[float] = None,
               tol: float = COEF_TOL) -> List[NuisanceFit]:
    """Warm-started fits along a decreasing lambda sequence.

    With ``max_dev_ratio`` set, the path stops early (returning a shorter list)
    once the fraction of null deviance explained exceeds it or stops moving.
    """
    prob = _standardise(X, y, link.kind, penalty_factor)
    fits = []
    b = None
    null_dev = None
    if max_dev_ratio is not None:
        null_dev = _deviance(link.kind, prob.y, np.full(len(prob.y), _null_index(link.kind, prob.y)))
    prev_ratio = None
    for lam in lambdas:
        if fits and null_dev is not None and null_dev > 0:
            ratio = 1.0 - _deviance(link.kind, prob.y, prob.Xs @ b) / null_dev
            if ratio > max_dev_ratio or (prev_ratio is not None and ratio - prev_ratio < 1e-5 * ratio):
                break
            prev_ratio = ratio
        b, sweeps, converged = _solve(prob, float(lam), b, max_sweeps, tol)
        kkt = kkt_violation(prob.kind, prob.Xs, prob.y, b, lam, prob.pen)
        fits.append(NuisanceFit(
            coef=b / prob.scale, link=link, lam=float(lam), n_iter=sweeps,
            converged=converged and kkt <= kkt_tolerance(lam), kkt_max_violation=kkt,
            objective=_objective(prob.kind, prob.Xs, prob.y, b, lam, prob.pen),
        ))
    return fits


def _null_index(kind: str, y: NDArray) -> float:
    ybar = float(np.clip(y.mean(), 1e-12, 1 - 1e-12)) if kind != "identity" else float(y.mean())
    if kind == "logistic":
        return float(special.logit(ybar))
    if kind == "probit":
        return float(special.ndtri(ybar))
    return ybar


def _deviance(kind: str, y: NDArray, eta: NDArray) -> float:
    if kind == "identity":
        return float(np.mean((y - eta) ** 2))
    prob = special.expit(eta) if kind == "logistic" else special.ndtr(eta)
    prob = np.clip(prob, 1e-12, 1 - 1e-12)
    return float(-2.0 * np.mean(y * np.log(prob) + (1 - y) * np.log1p(-prob)))


def cv_lambda(X: NDArray, y: NDArray, link: Link, K: int = 5, seed: int = 0, penalty_factor=None,
              n_lambda: int = N_LAMBDA, max_sweeps: int = 2_000, patience: int = 10) -> float:
    """K-fold cross-validated deviance minimiser over the geometric lambda grid.

    Folds advance together down the grid with warm starts. The scan stops once
    the pooled CV deviance has failed to improve on its running minimum for
    ``patience`` consecutive grid points, or when every fold's path saturates.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n = X.shape[0]
    if K < 2 or n < 2 * K:
        raise InvalidConfigError(f"need K >= 2 and n >= 2K, got K={K}, n={n}")
    if np.ptp(y) == 0.0:
        raise DataError("response is constant; lambda selection is undefined")
    grid = lambda_grid(X, y, penalty_factor, n_lambda)
    folds = make_rng(seed, 0xC5).permutation(n) % K
    states = []
    for k in range(K):
        tr, te = folds != k, folds == k
        if np.ptp(y[tr]) == 0.0:
            continue
        prob = _standardise(X[tr], y[tr], link.kind, penalty_factor)
        null_dev = _deviance(link.kind, prob.y, np.full(tr.sum(), _null_index(link.kind, prob.y)))
        states.append({"prob": prob, "te": te, "b": None, "null": null_dev, "ratio": None, "done": False})
    err = np.full(len(grid), np.inf)
    best, stale = np.inf, 0
    for i, lam in enumerate(grid):
        total = 0.0
        for st in states:
            prob = st["prob"]
            if st["b"] is not None and st["null"] > 0:
                ratio = 1.0 - _deviance(link.kind, prob.y, prob.Xs @ st["b"]) / st["null"]
                prev = st["ratio"]
                if ratio > 0.999 or (prev is not None and ratio - prev < 1e-5 * ratio):
                    st["done"] = True
                st["ratio"] = ratio
            if st["done"]:
                total = np.inf
                continue
            st["b"], _, _ = _solve(prob, float(lam), st["b"], max_sweeps, CV_COEF_TOL)
            coef = st["b"] / prob.scale
            te = st["te"]
            total += _deviance(link.kind, y[te], X[te] @ coef) * te.sum()
        err[i] = total
        if not np.isfinite(total):
            break
        if total < best:
            best, stale = total, 0
        else:
            stale += 1
            if stale >= patience:
                break
    # ties resolve toward the larger (sparser) lambda
    return float(grid[int(np.argmin(err))])


def select_lambda(train: Dataset, response: str, link: Link, K: int = 5, seed: int = 0) -> float:
    X, y = response_data(train, response)
    return cv_lambda(X, y, link, K, seed)

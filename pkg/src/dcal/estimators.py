"""Plug-in, singly and doubly calibrated estimators with normal intervals.

Binary treatment: all estimators average the AIPW score
``H = T / pi * (Y - r) + r`` and differ only in which ``(pi, r)`` they plug in.

* DML: trimmed ``pi_hat`` and ``r_hat``.
* SCal: trimmed ``pi_hat`` and calibrated ``r_tilde = r_hat + mu_hat``.
* DCal: calibrated ``pi_tilde`` and ``r_tilde``.

Partially linear model: a one-step correction of the initial coefficient,
``tau + mean((T - pi_tilde)(Y - T tau - r_hat - mu_hat)) / mean((T - pi_tilde)^2)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray
from scipy import stats

from .core_types import (
    Dataset,
    InvalidConfigError,
    Link,
    NumericError,
    SplitData,
    TuningParams,
    default_M_gamma,
    eval_link_vector,
)
from .glm_lasso import cv_lambda, fit_penalized, response_data
from .or_calibration import (
    OrCalibration,
    build_qp_inputs,
    build_qp_inputs_plm,
    calibrate_or,
    estimate_pi_hat,
)
from .ps_calibration import PsCalibration, augment_covariates, calibrate_ps, calibrate_ps_plm

ESTIMATOR_KINDS = ("DML", "SCal_r", "DCal", "DCal_PLM", "Oracle")


# =============================================================================
# REPORTS
# =============================================================================


def confidence_interval(tau_hat: float, se: float, level: float) -> Tuple[float, float]:
    """Two-sided normal interval ``tau_hat -+ z se``."""
    if not (0.0 < level < 1.0):
        raise InvalidConfigError(f"level must lie in (0, 1), got {level!r}")
    if se < 0:
        raise InvalidConfigError("standard error must be non-negative")
    if se == 0:
        return float(tau_hat), float(tau_hat)
    z = float(stats.norm.ppf(1.0 - (1.0 - level) / 2.0))
    return float(tau_hat - z * se), float(tau_hat + z * se)


@dataclass(frozen=True)
class EstimateReport:
    estimator_kind: str
    tau_hat: float
    se: float
    ci: Tuple[float, float]
    n_used: int
    diagnostics: Dict[str, float] = field(default_factory=dict)
    or_cal: Optional[OrCalibration] = field(default=None, repr=False, compare=False)
    ps_cal: Optional[PsCalibration] = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {
            "estimator": self.estimator_kind,
            "tau_hat": self.tau_hat,
            "se": self.se,
            "ci": list(self.ci),
            "n_used": self.n_used,
            "diagnostics": dict(self.diagnostics),
        }


def aipw_score(T, Y, pi, r):
    """``T / pi * (Y - r) + r``, elementwise."""
    pi = np.asarray(pi, dtype=float)
    if np.any(~np.isfinite(pi)) or np.any((pi <= 0) | (pi >= 1)):
        raise NumericError("propensity outside (0, 1)")
    out = np.asarray(T, float) / pi * (np.asarray(Y, float) - r) + r
    return float(out) if out.ndim == 0 else out


def _score_report(kind: str, H: NDArray, level: float, diagnostics: dict, **extra) -> EstimateReport:
    n = H.size
    tau = float(np.mean(H))
    se = float(np.std(H, ddof=1) / math.sqrt(n)) if n > 1 else math.inf
    return EstimateReport(kind, tau, se, confidence_interval(tau, se, level) if np.isfinite(se)
                          else (-math.inf, math.inf), n, diagnostics, **extra)


# =============================================================================
# NUISANCES AND TUNING
# =============================================================================


@dataclass(frozen=True)
class Nuisances:
    """Training-split fits. ``tau_init`` is the initial coefficient (PLM only)."""

    beta_hat: NDArray
    gamma_hat: NDArray
    lam_r: float
    lam_pi: float
    tau_init: float = math.nan


def fit_nuisances(train: Dataset, phi: Link, psi: Link, plm: bool = False, K: int = 5, seed: int = 0,
                  lam_r: Optional[float] = None, lam_pi: Optional[float] = None) -> Nuisances:
    """Cross-validated lasso fits of the outcome and propensity models.

    For the partially linear model the outcome fit regresses ``Y`` on
    ``[X, T]`` with the treatment column unpenalised; its coefficient is the
    initial ``tau``.
    """
    Xp, yp = response_data(train, "treatment")
    if lam_pi is None:
        lam_pi = cv_lambda(Xp, yp, phi, K=K, seed=seed)
    gamma = fit_penalized(Xp, yp, phi, lam_pi, response="treatment").coef
    if not plm:
        Xr, yr = response_data(train, "outcome_on_treated")
        if lam_r is None:
            lam_r = cv_lambda(Xr, yr, psi, K=K, seed=seed + 1)
        beta = fit_penalized(Xr, yr, psi, lam_r, response="outcome_on_treated").coef
        return Nuisances(beta, gamma, float(lam_r), float(lam_pi))
    XT = np.column_stack([train.X, train.T])
    pen = np.ones(XT.shape[1])
    pen[-1] = 0.0
    if lam_r is None:
        lam_r = cv_lambda(XT, train.Y, psi, K=K, seed=seed + 1, penalty_factor=pen)
    coef = fit_penalized(XT, train.Y, psi, lam_r, penalty_factor=pen, response="outcome_all").coef
    return Nuisances(coef[:-1], gamma, float(lam_r), float(lam_pi), float(coef[-1]))


def resolve_tuning(split: SplitData, nuis: Nuisances, phi: Link, tuning: TuningParams,
                   plm: bool = False) -> TuningParams:
    """Fill unset tolerances and bounds from the data.

    ``M_gamma``: 1.1 times the largest training index, clipped to [2, 10].
    ``M_r``: twice the largest ``|Y|`` over the training and auxiliary splits.
    ``M_pi``: ``max(2 / min pi_hat, 1 / phi(-M_gamma))`` on the main split
    (binary treatment), so the trimmed anchor always meets the bound, or
    ``max(2 max|pi_hat|, 2 / mean((T - pi_hat)^2))`` (partially linear).
    """
    main = split.main
    bounds = {}
    M_gamma = tuning.M_gamma if tuning.M_gamma is not None else default_M_gamma(split.train.X, nuis.gamma_hat)
    bounds["M_gamma"] = M_gamma
    bounds["M_r"] = 2.0 * float(max(np.max(np.abs(split.train.Y)), np.max(np.abs(split.aux.Y))))
    if plm:
        pi = eval_link_vector(phi, main.X @ nuis.gamma_hat)
        var = float(np.mean((main.T - pi) ** 2))
        bounds["M_pi"] = max(2.0 * float(np.max(np.abs(pi))), 2.0 / var)
    else:
        pi = estimate_pi_hat(main.X, nuis.gamma_hat, phi, M_gamma).pi_hat
        floor = 1.0 / float(eval_link_vector(phi, np.array([-M_gamma]))[0])
        bounds["M_pi"] = max(2.0 / float(np.min(pi)), floor)
    return tuning.with_defaults(main.n, main.p, **bounds)


# =============================================================================
# ATE ESTIMATORS
# =============================================================================


def estimate_dml(main: Dataset, beta_hat, gamma_hat, phi: Link, psi: Link, M_gamma: float,
                 level: float = 0.95) -> EstimateReport:
    """Plug-in AIPW average with the trimmed propensity."""
    ps = estimate_pi_hat(main.X, gamma_hat, phi, M_gamma)
    r_hat = eval_link_vector(psi, main.X @ np.asarray(beta_hat, dtype=float))
    H = aipw_score(main.T, main.Y, ps.pi_hat, r_hat)
    return _score_report("DML", H, level, {"trimmed_count": int(ps.index_trimmed.sum())})


def _or_calibration(split: SplitData, nuis: Nuisances, phi: Link, psi: Link, tuning: TuningParams):
    inputs = build_qp_inputs(split.main, split.aux, nuis.beta_hat, nuis.gamma_hat, phi, psi,
                             tuning.M_gamma)
    return inputs, calibrate_or(inputs, tuning)


def estimate_scal_r(split: SplitData, nuis: Nuisances, phi: Link, psi: Link, tuning: TuningParams,
                    or_cal: Optional[Tuple] = None) -> EstimateReport:
    """AIPW average with the trimmed propensity and the calibrated outcome model."""
    inputs, cal = or_cal if or_cal is not None else _or_calibration(split, nuis, phi, psi, tuning)
    main = split.main
    r_tilde = inputs.r_hat + cal.mu
    H = aipw_score(main.T, main.Y, inputs.pi_hat, r_tilde)
    diag = {
        "mu_norm2": float(np.linalg.norm(cal.mu)),
        "or_feasible": bool(cal.feasible),
        "escalations": int(cal.escalations),
        "trimmed_count": int(inputs.trimmed_count),
    }
    return _score_report("SCal_r", H, tuning.level, diag, or_cal=cal)


def _calibrated_index(X: NDArray, X_tilde: NDArray, gamma_tilde: NDArray) -> NDArray:
    # evaluate the original and synthetic blocks separately so a zero synthetic
    # block reproduces X @ gamma_hat bit for bit
    p = X.shape[1]
    eta = X @ gamma_tilde[:p]
    tail = gamma_tilde[p:]
    if tail.size and np.any(tail != 0):
        eta = eta + X_tilde[:, p:] @ tail
    return eta


def estimate_dcal(split: SplitData, nuis: Nuisances, phi: Link, psi: Link, tuning: TuningParams,
                  synth_seed: int = 0, or_cal: Optional[Tuple] = None) -> EstimateReport:
    """AIPW average with both the calibrated propensity and outcome models."""
    inputs, cal = or_cal if or_cal is not None else _or_calibration(split, nuis, phi, psi, tuning)
    main = split.main
    aug = augment_covariates(main.X, synth_seed)
    ps = calibrate_ps(main, aug, nuis.beta_hat, nuis.gamma_hat, cal.mu, phi, psi, tuning,
                      seed=synth_seed)
    if ps.fell_back:
        warnings.warn("propensity calibration fell back to the initial fit", RuntimeWarning)
    eta = _calibrated_index(main.X, aug.X_tilde, ps.gamma_tilde)
    if ps.fell_back and inputs.trimmed_count:
        # the anchor keeps the trimming that protects the plug-in weights
        eta = np.clip(eta, -tuning.M_gamma, tuning.M_gamma)
    pi_tilde = eval_link_vector(phi, eta)
    r_tilde = inputs.r_hat + cal.mu
    H = aipw_score(main.T, main.Y, pi_tilde, r_tilde)
    p = main.p
    shift = float(np.abs(ps.gamma_tilde[:p] - nuis.gamma_hat).sum() + np.abs(ps.gamma_tilde[p:]).sum())
    diag = {
        "mu_norm2": float(np.linalg.norm(cal.mu)),
        "gamma_shift_l1": shift,
        "fell_back": bool(ps.fell_back),
        "or_feasible": bool(cal.feasible),
        "escalations": int(cal.escalations),
        "trimmed_count": int(inputs.trimmed_count),
    }
    return _score_report("DCal", H, tuning.level, diag, or_cal=cal, ps_cal=ps)


def estimate_oracle(main: Dataset, pi_star, r_star, level: float = 0.95) -> EstimateReport:
    """AIPW average with the true nuisances."""
    H = aipw_score(main.T, main.Y, pi_star, r_star)
    return _score_report("Oracle", H, level, {})


# =============================================================================
# PARTIALLY LINEAR MODEL
# =============================================================================


def estimate_dcal_plm(split: SplitData, nuis: Nuisances, phi: Link, psi: Link, tuning: TuningParams,
                      synth_seed: int = 0) -> EstimateReport:
    """One-step calibrated correction of the initial regression coefficient."""
    if not np.isfinite(nuis.tau_init):
        raise InvalidConfigError("partially linear estimation needs an initial coefficient")
    main = split.main
    tau0 = nuis.tau_init
    inputs = build_qp_inputs_plm(main, split.aux, nuis.beta_hat, nuis.gamma_hat, tau0, phi, psi)
    cal = calibrate_or(inputs, tuning)
    aug = augment_covariates(main.X, synth_seed)
    ps = calibrate_ps_plm(main, aug, nuis.beta_hat, nuis.gamma_hat, cal.mu, phi, psi, tuning,
                          seed=synth_seed)
    pi_tilde = eval_link_vector(phi, _calibrated_index(main.X, aug.X_tilde, ps.gamma_tilde))
    e = main.T - pi_tilde
    resid = main.Y - main.T * tau0 - inputs.r_hat - cal.mu
    s2 = float(np.mean(e * e))
    p = main.p
    diag = {
        "mu_norm2": float(np.linalg.norm(cal.mu)),
        "gamma_shift_l1": float(np.abs(ps.gamma_tilde[:p] - nuis.gamma_hat).sum()
                                + np.abs(ps.gamma_tilde[p:]).sum()),
        "fell_back": bool(ps.fell_back),
        "or_feasible": bool(cal.feasible),
        "escalations": int(cal.escalations),
        "trimmed_count": 0,
        "sigma_e_tilde": s2,
        "tau_init": float(tau0),
    }
    n = main.n
    if s2 <= 0:
        warnings.warn("calibrated treatment residual variance is zero", RuntimeWarning)
        return EstimateReport("DCal_PLM", float(tau0), math.inf, (-math.inf, math.inf), n, diag, cal, ps)
    psi_i = e * resid / s2
    tau = tau0 + float(np.mean(psi_i))
    se = float(np.std(psi_i, ddof=1) / math.sqrt(n))
    if s2 < 1.0 / tuning.M_pi:
        warnings.warn("calibrated treatment residual variance below 1 / M_pi", RuntimeWarning)
        diag["degenerate_variance"] = True
        return EstimateReport("DCal_PLM", tau, math.inf, (-math.inf, math.inf), n, diag, cal, ps)
    return EstimateReport("DCal_PLM", tau, se, confidence_interval(tau, se, tuning.level), n, diag,
                          cal, ps)


# =============================================================================
# CONVENIENCE
# =============================================================================


def estimate_all(split: SplitData, nuis: Nuisances, phi: Link, psi: Link, tuning: TuningParams,
                 kinds: Sequence[str] = ("DML", "SCal_r", "DCal"), synth_seed: int = 0,
                 plm: bool = False) -> Dict[str, EstimateReport]:
    """Run several estimators sharing one outcome calibration.

    ``tuning`` must already be resolved (see :func:`resolve_tuning`).
    """
    out: Dict[str, EstimateReport] = {}
    if plm:
        for k in kinds:
            if k != "DCal_PLM":
                raise InvalidConfigError(f"estimator {k!r} is not defined for the partially linear model")
        out["DCal_PLM"] = estimate_dcal_plm(split, nuis, phi, psi, tuning, synth_seed)
        return out
    unknown = set(kinds) - {"DML", "SCal_r", "DCal"}
    if unknown:
        raise InvalidConfigError(f"unknown estimators {sorted(unknown)}")
    shared = None
    if {"SCal_r", "DCal"} & set(kinds):
        shared = _or_calibration(split, nuis, phi, psi, tuning)
    for k in kinds:
        if k == "DML":
            out[k] = estimate_dml(split.main, nuis.beta_hat, nuis.gamma_hat, phi, psi, tuning.M_gamma,
                                  tuning.level)
        elif k == "SCal_r":
            out[k] = estimate_scal_r(split, nuis, phi, psi, tuning, shared)
        else:
            out[k] = estimate_dcal(split, nuis, phi, psi, tuning, synth_seed, shared)
    return out


def oracle_variances(eps_var, T, pi_tilde, pi_star, r_star, r_tilde) -> Dict[str, float]:
    """Plug-in values of the three asymptotic variance expressions."""
    T = np.asarray(T, float)
    pi_tilde = np.asarray(pi_tilde, float)
    pi_star = np.asarray(pi_star, float)
    v = np.broadcast_to(np.asarray(eps_var, float), T.shape)
    diff = np.asarray(r_star, float) - np.asarray(r_tilde, float)
    return {
        "sigma_bar_r2": float(np.mean(T * v / pi_tilde ** 2)),
        "sigma_bar_pi2": float(np.mean(v / pi_star)),
        "sigma_mu2": float(np.mean((1 - pi_star) * diff ** 2 / pi_star)),
    }

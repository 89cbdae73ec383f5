import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcal.core_types import Dataset, InvalidConfigError, Link, NumericError, SplitData, TuningParams, make_rng
from dcal.dgp import DgpConfig, generate
from dcal.estimators import (
    Nuisances,
    aipw_score,
    confidence_interval,
    estimate_all,
    estimate_dcal,
    estimate_dcal_plm,
    estimate_dml,
    estimate_oracle,
    estimate_scal_r,
    fit_nuisances,
    oracle_variances,
    resolve_tuning,
)

LOGIT, IDENT = Link.logistic(), Link.identity()
HUGE = TuningParams(eta_r=1e6, eta_pi1=1e6, eta_pi2=1e6, M_gamma=10.0)


def small_split(seed=0, n=120, p=8, regime="sparse_or_dense_ps"):
    cfg = DgpConfig(regime, n=n, n_aux=n, n_tr=n, p=p)
    split, truth = generate(cfg, seed)
    return cfg, split, truth


def fitted(seed=0, **kw):
    cfg, split, truth = small_split(seed, **kw)
    phi, psi = cfg.links()
    nuis = fit_nuisances(split.train, phi, psi, plm=cfg.is_plm, seed=seed)
    return cfg, split, truth, nuis, phi, psi


# =============================================================================
# SCORES AND INTERVALS
# =============================================================================


def test_aipw_examples():
    assert aipw_score(1, 2.0, 0.5, 1.0) == 3.0
    assert aipw_score(0, 123.0, 0.3, 1.7) == 1.7
    assert aipw_score(1, 0.4, 0.3, 0.4) == 0.4
    with pytest.raises(NumericError):
        aipw_score(1, 1.0, 1.0, 0.0)
    with pytest.raises(NumericError):
        aipw_score(1, 1.0, 0.0, 0.0)


def test_confidence_interval_examples():
    lo, hi = confidence_interval(0.0, 1.0, 0.95)
    assert math.isclose(hi, 1.959963984540054, rel_tol=1e-12) and lo == -hi
    assert confidence_interval(0.7, 0.0, 0.95) == (0.7, 0.7)
    lo, hi = confidence_interval(1.0, 2.0, 0.9)
    assert math.isclose(hi, 1 + 1.6448536269514722 * 2, rel_tol=1e-12)
    with pytest.raises(InvalidConfigError):
        confidence_interval(0.0, 1.0, 1.5)


def test_oracle_variance_examples():
    v = oracle_variances(1.0, np.ones(4), np.full(4, 0.5), np.full(4, 0.5), np.ones(4), np.ones(4))
    assert v["sigma_bar_r2"] == 4.0 and v["sigma_bar_pi2"] == 2.0 and v["sigma_mu2"] == 0.0


# =============================================================================
# DML
# =============================================================================


def test_dml_two_row_example():
    X = np.array([[1.0, 0.0], [1.0, 1.0]])
    main = Dataset(X, np.array([1.0, 0.0]), np.array([2.0, 9.0]))
    rep = estimate_dml(main, np.array([1.0, 0.0]), np.zeros(2), LOGIT, IDENT, 2.0)
    assert rep.tau_hat == 2.0


def test_dml_full_treatment_exact_outcome():
    rng = make_rng(1)
    X = np.column_stack([np.ones(10), rng.normal(size=10)])
    beta = np.array([0.5, 1.5])
    main = Dataset(X, np.ones(10), X @ beta)
    rep = estimate_dml(main, beta, np.array([1.0, 0.0]), LOGIT, IDENT, 2.0)
    assert math.isclose(rep.tau_hat, float(np.mean(main.Y)), rel_tol=1e-14)


@given(st.floats(-5, 5))
@settings(max_examples=20, deadline=None)
def test_dml_translation_equivariance(c):
    _, split, _ = small_split(3)
    main = split.main
    beta = np.r_[0.3, np.zeros(main.p - 1)]
    gamma = np.r_[0.1, 0.2, np.zeros(main.p - 2)]
    a = estimate_dml(main, beta, gamma, LOGIT, IDENT, 2.0)
    shifted = Dataset(main.X, main.T, main.Y + c)
    b = estimate_dml(shifted, beta + np.r_[c, np.zeros(main.p - 1)], gamma, LOGIT, IDENT, 2.0)
    assert abs(b.tau_hat - a.tau_hat - c) <= 1e-12 * (1 + abs(c))
    assert a.se > 0


# =============================================================================
# CALIBRATED ESTIMATORS
# =============================================================================


def test_reduction_identity_bitwise():
    cfg, split, truth, nuis, phi, psi = fitted(4)
    tuning = resolve_tuning(split, nuis, phi, HUGE)
    reps = estimate_all(split, nuis, phi, psi, tuning, ("DML", "SCal_r", "DCal"), 4)
    assert reps["DCal"].diagnostics["mu_norm2"] == 0.0
    assert reps["DCal"].tau_hat == reps["SCal_r"].tau_hat == reps["DML"].tau_hat


def test_estimate_all_shares_outcome_calibration():
    cfg, split, truth, nuis, phi, psi = fitted(5)
    tuning = resolve_tuning(split, nuis, phi, TuningParams())
    reps = estimate_all(split, nuis, phi, psi, tuning, ("SCal_r", "DCal"), 5)
    alone = estimate_scal_r(split, nuis, phi, psi, tuning)
    assert reps["SCal_r"].tau_hat == alone.tau_hat
    assert np.array_equal(reps["SCal_r"].or_cal.mu, reps["DCal"].or_cal.mu)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        d = estimate_dcal(split, nuis, phi, psi, tuning, 5)
    assert d.tau_hat == reps["DCal"].tau_hat


def test_report_invariants():
    cfg, split, truth, nuis, phi, psi = fitted(6)
    tuning = resolve_tuning(split, nuis, phi, TuningParams(level=0.9))
    for rep in estimate_all(split, nuis, phi, psi, tuning, ("DML", "SCal_r", "DCal"), 6).values():
        lo, hi = rep.ci
        assert rep.se > 0 and lo <= rep.tau_hat <= hi
        assert math.isclose(hi - rep.tau_hat, 1.6448536269514722 * rep.se, rel_tol=1e-12)
        d = rep.to_dict()
        assert d["estimator"] == rep.estimator_kind and d["n_used"] == split.main.n


def test_resolve_tuning_defaults():
    cfg, split, truth, nuis, phi, psi = fitted(7)
    t = resolve_tuning(split, nuis, phi, TuningParams(M_r=3.0))
    assert t.M_r == 3.0
    assert 2.0 <= t.M_gamma <= 10.0
    floor = 1 / LOGIT.value(np.array([-t.M_gamma]))[0]
    assert t.M_pi >= floor
    n, p = split.main.n, split.main.p
    assert math.isclose(t.eta_r, math.sqrt(math.log(p) / n))


def test_unknown_estimator_rejected():
    cfg, split, truth, nuis, phi, psi = fitted(8)
    tuning = resolve_tuning(split, nuis, phi, TuningParams())
    with pytest.raises(InvalidConfigError):
        estimate_all(split, nuis, phi, psi, tuning, ("DML", "TMLE"))
    with pytest.raises(InvalidConfigError):
        estimate_all(split, nuis, phi, psi, tuning, ("DML",), plm=True)


def test_oracle_estimator_unbiased_in_mean():
    cfg = DgpConfig("sparse_ps_dense_or", n=200, n_aux=3, n_tr=3, p=5)
    err = []
    for rep in range(2000):
        split, truth = generate(cfg, 11, rep)
        err.append(estimate_oracle(split.main, truth.pi_star, truth.r_star).tau_hat - truth.tau_bar_star)
    err = np.array(err)
    assert abs(err.mean()) <= 2 * err.std(ddof=1) / math.sqrt(err.size)


# =============================================================================
# PARTIALLY LINEAR MODEL
# =============================================================================


def _exact_plm_split(seed=0, n=60, p=4, tau=1.3):
    rng = make_rng(seed)
    N = 3 * n
    X = np.column_stack([np.ones(N), rng.uniform(-1, 1, (N, p - 1))])
    beta = np.r_[0.5, 1.0, -1.0, np.zeros(p - 3)]
    gamma = np.r_[0.2, 0.5, np.zeros(p - 2)]
    T = X @ gamma + rng.uniform(-1, 1, N)
    Y = T * tau + X @ beta
    full = Dataset(X, T, Y, "continuous")
    idx = np.arange(N)
    parts = [idx[:n], idx[n:2 * n], idx[2 * n:]]
    split = SplitData(*(full.subset(i) for i in parts), *parts)
    return split, Nuisances(beta, gamma, 0.0, 0.0, tau), tau


def test_plm_exact_nuisance_fixed_point():
    split, nuis, tau = _exact_plm_split()
    tuning = resolve_tuning(split, nuis, IDENT, TuningParams(), plm=True)
    rep = estimate_dcal_plm(split, nuis, IDENT, IDENT, tuning)
    assert rep.diagnostics["mu_norm2"] == 0.0
    assert abs(rep.tau_hat - tau) <= 1e-12
    assert rep.diagnostics["sigma_e_tilde"] > 0


def test_plm_degenerate_variance_flagged():
    split, nuis, tau = _exact_plm_split(1)
    tuning = resolve_tuning(split, nuis, IDENT, TuningParams(M_pi=1.01), plm=True)
    with pytest.warns(RuntimeWarning):
        rep = estimate_dcal_plm(split, nuis, IDENT, IDENT, tuning)
    assert rep.se == math.inf and rep.diagnostics.get("degenerate_variance")


def test_plm_pipeline_runs():
    cfg, split, truth, nuis, phi, psi = fitted(9, regime="plm_sparse_or")
    tuning = resolve_tuning(split, nuis, phi, TuningParams(), plm=True)
    rep = estimate_all(split, nuis, phi, psi, tuning, ("DCal_PLM",), 9, plm=True)["DCal_PLM"]
    assert np.isfinite(rep.tau_hat) and rep.se > 0
    assert abs(rep.tau_hat - truth.tau_star) < 6 * rep.se

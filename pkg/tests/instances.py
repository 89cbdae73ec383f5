"""Seeded tiny problem instances shared by unit and acceptance tests."""

from __future__ import annotations

import numpy as np

from dcal.core_types import Dataset, Link, TuningParams, make_rng
from dcal.or_calibration import QpInputs
from dcal.ps_calibration import augment_covariates, build_ps_problem, feasibility_report

# grid-oracle minima of ||gamma - gamma_hat||_1 for tiny_ps_problem(0..9),
# from oracles.ps_grid_oracle (step 0.1 on [-3, 3]^4, refined at step 0.005)
PS_GRID_MINIMA = (1.5275, 0.6420, 1.9552, 0.9283, 1.2197, 0.9365, 0.9018, 1.6388, 0.1022, 0.5732)
# ps_grid_oracle(kind="plm") on tiny_ps_problem_plm(k), k = 0..4
PLM_GRID_MINIMA = (0.4852, 0.5422, 0.1776, 0.2212, 0.3869)


def tiny_qp_inputs(k: int):
    """Random balance-QP data with ``n <= 4`` unknowns and ``p <= 3`` moments.

    Returns ``(inputs, tuning)``; every fifth instance has a tolerance small
    enough to need escalation (and a roomy box so escalation succeeds).
    """
    rng = make_rng(77, k)
    n = int(rng.integers(2, 5))
    p = int(rng.integers(1, 4))
    if k % 5 == 4:
        n = max(n, p)
    n_aux = 5
    X = np.column_stack([np.ones(n), rng.uniform(-1, 1, (n, p - 1))])
    X_aux = np.column_stack([np.ones(n_aux), rng.uniform(-1, 1, (n_aux, p - 1))])
    Pi = rng.uniform(1.0, 3.0, n)
    Pi_aux = rng.uniform(1.0, 3.0, n_aux)
    R = rng.normal(0.0, 1.0, n_aux)
    inputs = QpInputs(X, X_aux, Pi, Pi_aux, R, np.zeros(n), 1.0 / Pi)
    eta = 1e-3 if k % 5 == 4 else float(rng.uniform(0.05, 0.5))
    M_r = 10.0 if k % 5 == 4 else float(rng.uniform(0.5, 3.0))
    tuning = TuningParams(eta_r=eta, M_r=M_r)
    return inputs, tuning


def tiny_ps_problem(k: int):
    """Logistic program with ``n = 4``, ``p = 2`` (augmented to 4 columns).

    A planted point ``g0`` fixes the tolerances at 1.1 times what it needs, so
    the program is feasible; the anchor is guaranteed infeasible.
    """
    rng = make_rng(2024, k)
    phi, psi = Link.logistic(), Link.identity()
    while True:
        X = np.column_stack([np.ones(4), rng.uniform(-1, 1, 4)])
        T = np.array([1.0, 1.0, 0.0, 1.0]) if k % 2 == 0 else np.array([1.0, 0.0, 1.0, 1.0])
        main = Dataset(X, T, rng.normal(size=4))
        aug = augment_covariates(X, k)
        beta = rng.normal(0, 0.5, 2)
        gamma_hat = rng.normal(0, 0.5, 2)
        mu = rng.normal(0, 0.3, 4)
        g0 = rng.uniform(-1.5, 1.5, 4)
        unit = build_ps_problem(main, aug, beta, gamma_hat, mu, phi, psi,
                                TuningParams(eta_pi1=1, eta_pi2=1, M_pi=100))
        need = np.abs(unit.moments(unit.index(g0))) / unit.tol
        e1 = 1.1 * max(need[unit.group != 3].max(), 1e-3)
        e2 = 1.1 * max(need[unit.group == 3].max(), 1e-3)
        M_pi = 1.2 * np.max(T / phi.value(unit.index(g0)))
        prob = build_ps_problem(main, aug, beta, gamma_hat, mu, phi, psi,
                                TuningParams(eta_pi1=e1, eta_pi2=e2, M_pi=M_pi))
        if not feasibility_report(prob.anchor, prob).feasible and feasibility_report(g0, prob).feasible:
            return prob


def tiny_ps_problem_plm(k: int):
    """Partially linear analogue of :func:`tiny_ps_problem` (identity link, continuous T)."""
    rng = make_rng(2025, k)
    phi, psi = Link.identity(), Link.identity()
    while True:
        X = np.column_stack([np.ones(4), rng.uniform(-1, 1, 4)])
        T = rng.normal(0.5, 1.0, 4)
        main = Dataset(X, T, rng.normal(size=4), "continuous")
        aug = augment_covariates(X, k)
        beta = rng.normal(0, 0.5, 2)
        gamma_hat = rng.normal(0, 0.5, 2)
        mu = rng.normal(0, 0.3, 4)
        g0 = rng.uniform(-1.5, 1.5, 4)
        unit = build_ps_problem(main, aug, beta, gamma_hat, mu, phi, psi,
                                TuningParams(eta_pi1=1, eta_pi2=1, M_pi=100), "plm")
        pi0 = unit.index(g0)
        w0 = T - pi0
        need = np.abs(unit.moments(pi0)) / unit.tol
        need_prod = abs(w0 @ pi0 / 4) / (np.linalg.norm(pi0) / 2)
        e1 = 1.1 * max(need[unit.group != 3].max(), need_prod, 1e-3)
        e2 = 1.1 * max(need[unit.group == 3].max(), 1e-3)
        M_pi = 1.2 * max(np.max(np.abs(pi0)), 1.0 / np.mean(w0 ** 2))
        prob = build_ps_problem(main, aug, beta, gamma_hat, mu, phi, psi,
                                TuningParams(eta_pi1=e1, eta_pi2=e2, M_pi=M_pi), "plm")
        if not feasibility_report(prob.anchor, prob).feasible and feasibility_report(g0, prob).feasible:
            return prob

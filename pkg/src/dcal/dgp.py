"""Seeded data-generating processes for the simulation designs.

Every design draws bounded covariates ``Z`` (AR(1) Gaussian clipped to
[-2, 2]), prepends an intercept, and pairs one nuisance that is an exact
(or approximately) sparse GLM with one that is a fixed dense nonlinearity.

Regimes
-------
sparse_or_dense_ps   r* = X beta* (s_r nonzeros), pi* dense sinusoid
sparse_ps_dense_or   pi* = expit(X gamma*) (s_pi nonzeros), r* dense
both_sparse          both GLMs sparse
approx_sparse_or     beta*_j ~ (-1)^(j+1) j^-(xi_r + 1/2), pi* dense
approx_sparse_ps     gamma*_j ~ (-1)^(j+1) j^-(xi_pi + 1/2) / 2, r* dense
plm_sparse_or        Y = T tau* + X beta* + eps, T = dense + e
plm_sparse_ps        Y = T tau* + dense + eps,   T = X gamma* + e
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import numpy as np
from numpy.typing import NDArray
from scipy import special, stats

from .core_types import Dataset, InvalidConfigError, Link, SplitData, make_rng

REGIMES = (
    "sparse_or_dense_ps",
    "sparse_ps_dense_or",
    "both_sparse",
    "approx_sparse_or",
    "approx_sparse_ps",
    "plm_sparse_or",
    "plm_sparse_ps",
)
Z_CAP = 2.0
NOISE_CAP = 3.0
PS_AMPLITUDE = 0.5
OR_AMPLITUDE = 0.5
APPROX_OR_AMPLITUDE = 1.0
OR_INTERCEPT = 1.0


@dataclass(frozen=True)
class DgpConfig:
    regime: str = "sparse_or_dense_ps"
    n: int = 400
    n_aux: int = 400
    n_tr: int = 400
    p: int = 500
    s_r: int = 3
    s_pi: int = 3
    xi_r: float = 1.0
    xi_pi: float = 1.0
    c_pi: float = 0.04
    noise_sd: float = 1.0
    tau_star: float = 1.0
    covariate_rho: float = 0.3
    treat_sd: float = 1.0

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise InvalidConfigError(f"unknown regime {self.regime!r}; expected one of {', '.join(REGIMES)}")
        for name in ("n", "n_aux", "n_tr"):
            if getattr(self, name) < 3:
                raise InvalidConfigError(f"{name} must be at least 3")
        if self.p < 2:
            raise InvalidConfigError("p must be at least 2")
        if not (0 <= self.s_r <= self.p - 1 and 0 <= self.s_pi <= self.p - 1):
            raise InvalidConfigError("sparsity levels must lie in [0, p - 1]")
        if not (self.xi_r > 0 and self.xi_pi > 0):
            raise InvalidConfigError("decay exponents must be positive")
        if not (0 < self.c_pi < 0.5):
            raise InvalidConfigError("c_pi must lie in (0, 0.5)")
        if not (self.noise_sd >= 0 and self.treat_sd > 0):
            raise InvalidConfigError("noise scales must be non-negative (treatment noise positive)")
        if not (0 <= self.covariate_rho < 1):
            raise InvalidConfigError("covariate_rho must lie in [0, 1)")
        if self.regime == "sparse_or_dense_ps" and self.s_r < 1:
            raise InvalidConfigError("sparse outcome regime needs s_r >= 1")

    @property
    def is_plm(self) -> bool:
        return self.regime.startswith("plm")

    @property
    def N(self) -> int:
        return self.n + self.n_aux + self.n_tr

    def links(self) -> Tuple[Link, Link]:
        """``(phi, psi)``: propensity and outcome links used for fitting."""
        if self.is_plm:
            return Link.identity(), Link.identity()
        return Link.logistic(), Link.identity()


@dataclass(frozen=True)
class DgpTruth:
    """Oracle quantities on the main split."""

    r_star: NDArray
    pi_star: NDArray
    tau_bar_star: float
    beta_star: Optional[NDArray]
    gamma_star: Optional[NDArray]
    eps_var: float
    tau_star: float = math.nan
    sigma_e2: float = math.nan


# =============================================================================
# COEFFICIENTS AND DENSE FUNCTIONS
# =============================================================================


def sparse_coef(p: int, s: int, amplitude: float, intercept: float = 0.0) -> NDArray:
    """``s`` alternating-sign coefficients of size ``amplitude`` after the intercept."""
    b = np.zeros(p)
    b[0] = intercept
    b[1:s + 1] = amplitude * np.where(np.arange(s) % 2 == 0, 1.0, -1.0)
    return b


def approx_sparse_coef(p: int, xi: float, amplitude: float, intercept: float = 0.0) -> NDArray:
    """Alternating coefficients ``amplitude * j^-(xi + 1/2)``; the tail beyond ``s`` has l2^2 mass of order ``s^-2 xi``."""
    j = np.arange(1, p, dtype=float)
    b = np.empty(p)
    b[0] = intercept
    b[1:] = amplitude * np.where(j % 2 == 1, 1.0, -1.0) * j ** -(xi + 0.5)
    return b


def dense_weights(p: int) -> NDArray:
    """Unit-norm weights ``w_j ~ j^-0.1`` on the ``p - 1`` covariates."""
    w = np.arange(1, p, dtype=float) ** -0.1
    return w / np.linalg.norm(w)


def dense_or(Z: NDArray) -> NDArray:
    """Bounded nonlinearity ``sin(Z w) + 0.5 * 1{z2 z3 > 0}``."""
    w = dense_weights(Z.shape[1] + 1)
    out = np.sin(Z @ w)
    if Z.shape[1] >= 3:
        out = out + 0.5 * (Z[:, 1] * Z[:, 2] > 0)
    return out


def dense_ps(Z: NDArray, c_pi: float) -> NDArray:
    """``0.5 + 0.4 sin(Z w)`` clipped to lie strictly inside ``(c_pi, 1 - c_pi)``."""
    w = dense_weights(Z.shape[1] + 1)
    return np.clip(0.5 + 0.4 * np.sin(Z @ w), c_pi + 1e-12, 1 - c_pi - 1e-12)


def truncated_normal(rng: np.random.Generator, sd: float, size) -> NDArray:
    """Gaussian noise clipped at ``NOISE_CAP`` standard deviations."""
    return np.clip(rng.standard_normal(size), -NOISE_CAP, NOISE_CAP) * sd


def clipped_normal_var(sd: float) -> float:
    """Variance of a standard normal clipped at +-NOISE_CAP, scaled by ``sd^2``."""
    c = NOISE_CAP
    tail = stats.norm.sf(c)
    inner = (1 - 2 * tail) - 2 * c * stats.norm.pdf(c)
    return sd * sd * (inner + 2 * c * c * tail)


def draw_covariates(rng: np.random.Generator, N: int, d: int, rho: float) -> NDArray:
    """AR(1) Gaussian columns with unit marginal variance, clipped to [-Z_CAP, Z_CAP]."""
    E = rng.standard_normal((N, d))
    Z = np.empty_like(E)
    Z[:, 0] = E[:, 0]
    s = math.sqrt(1 - rho * rho)
    for j in range(1, d):
        Z[:, j] = rho * Z[:, j - 1] + s * E[:, j]
    return np.clip(Z, -Z_CAP, Z_CAP)


# =============================================================================
# GENERATION
# =============================================================================


def _nuisances(cfg: DgpConfig, X: NDArray):
    """``(r*, pi*, beta*, gamma*)`` evaluated on all rows."""
    Z = X[:, 1:]
    p = cfg.p
    beta = gamma = None
    reg = cfg.regime
    # a hair inside the bounds so the overlap inequalities hold strictly
    lo, hi = special.logit(cfg.c_pi) + 1e-9, special.logit(1 - cfg.c_pi) - 1e-9
    if reg in ("sparse_or_dense_ps", "both_sparse", "plm_sparse_or"):
        beta = sparse_coef(p, cfg.s_r, OR_AMPLITUDE, OR_INTERCEPT)
        r = X @ beta
    elif reg == "approx_sparse_or":
        beta = approx_sparse_coef(p, cfg.xi_r, APPROX_OR_AMPLITUDE, OR_INTERCEPT)
        r = X @ beta
    else:
        r = dense_or(Z)
    if reg in ("sparse_ps_dense_or", "both_sparse"):
        gamma = sparse_coef(p, cfg.s_pi, PS_AMPLITUDE)
        pi = special.expit(np.clip(X @ gamma, lo, hi))
    elif reg == "approx_sparse_ps":
        gamma = approx_sparse_coef(p, cfg.xi_pi, PS_AMPLITUDE)
        pi = special.expit(np.clip(X @ gamma, lo, hi))
    elif reg == "plm_sparse_ps":
        gamma = sparse_coef(p, cfg.s_pi, PS_AMPLITUDE)
        pi = X @ gamma
    else:
        pi = dense_ps(Z, cfg.c_pi)
    return r, pi, beta, gamma


def generate(config: DgpConfig, seed: int, rep: int = 0) -> Tuple[SplitData, DgpTruth]:
    """Draw one replication; rows are i.i.d., so the first ``n`` form the main split."""
    cfg = config
    rng = make_rng(seed, 0xD6, rep)
    N = cfg.N
    Z = draw_covariates(rng, N, cfg.p - 1, cfg.covariate_rho)
    X = np.column_stack([np.ones(N), Z])
    r, pi, beta, gamma = _nuisances(cfg, X)
    eps1 = truncated_normal(rng, cfg.noise_sd, N)
    eps0 = truncated_normal(rng, cfg.noise_sd, N)
    u = rng.random(N)
    e = truncated_normal(rng, cfg.treat_sd, N)
    if cfg.is_plm:
        T = pi + e
        Y = T * cfg.tau_star + r + eps1
        kind = "continuous"
    else:
        T = (u < pi).astype(float)
        Y = T * (r + eps1) + (1 - T) * eps0
        kind = "binary"
    idx = np.arange(N)
    cuts = (cfg.n, cfg.n + cfg.n_aux)
    main_idx, aux_idx, train_idx = idx[:cuts[0]], idx[cuts[0]:cuts[1]], idx[cuts[1]:]
    full = Dataset(X, T, Y, kind)
    split = SplitData(full.subset(main_idx), full.subset(aux_idx), full.subset(train_idx),
                      main_idx, aux_idx, train_idx)
    rm, pm = r[main_idx], pi[main_idx]
    truth = DgpTruth(
        r_star=rm,
        pi_star=pm,
        tau_bar_star=float(np.mean(rm)),
        beta_star=beta,
        gamma_star=gamma,
        eps_var=clipped_normal_var(cfg.noise_sd),
        tau_star=cfg.tau_star if cfg.is_plm else math.nan,
        sigma_e2=clipped_normal_var(cfg.treat_sd) if cfg.is_plm else math.nan,
    )
    return split, truth


def population_tau(config: DgpConfig, seed: int, reps: int) -> Tuple[float, float]:
    """Monte Carlo mean of the per-replication target and its standard error."""
    if reps < 1:
        raise InvalidConfigError("reps must be at least 1")
    vals = np.array([generate(config, seed, k)[1].tau_bar_star for k in range(reps)])
    se = float(vals.std(ddof=1) / math.sqrt(reps)) if reps > 1 else math.nan
    return float(vals.mean()), se

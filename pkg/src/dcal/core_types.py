"""Shared domain types, link functions, RNG streams and three-way splitting."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray
from scipy import special

# =============================================================================
# ERRORS
# =============================================================================


class DcalError(Exception):
    """Base class for all package errors."""


class InvalidConfigError(DcalError, ValueError):
    """Inconsistent configuration or arguments."""


class DataError(DcalError, ValueError):
    """Input data violates a structural requirement."""


class NumericError(DcalError, ArithmeticError):
    """Non-finite or out-of-domain numeric input."""


# =============================================================================
# RNG
# =============================================================================


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Philox (counter-based) generator keyed by ``seed`` and a substream path.

    The same ``(seed, *stream)`` always produces the same bits, independent of
    platform and of which process draws them.
    """
    if seed < 0 or any(s < 0 for s in stream):
        raise InvalidConfigError("seeds and stream indices must be non-negative")
    ss = np.random.SeedSequence([int(seed), *map(int, stream)])
    return np.random.Generator(np.random.Philox(ss))


# =============================================================================
# LINKS
# =============================================================================

_SQRT_2PI = math.sqrt(2.0 * math.pi)


def _norm_pdf(t):
    return np.exp(-0.5 * np.square(t)) / _SQRT_2PI


# module-level so that links pickle across worker processes
def _id_value(t):
    return np.asarray(t, dtype=float) * 1.0


def _id_deriv(t):
    return np.ones_like(np.asarray(t, dtype=float))


def _id_deriv2(t):
    return np.zeros_like(np.asarray(t, dtype=float))


def _logistic_deriv(t):
    p = special.expit(t)
    return p * (1.0 - p)


def _logistic_deriv2(t):
    p = special.expit(t)
    return p * (1.0 - p) * (1.0 - 2.0 * p)


def _probit_deriv2(t):
    return -np.asarray(t) * _norm_pdf(t)


@dataclass(frozen=True)
class Link:
    """A scalar link function with its first two derivatives and inverse.

    All callables act elementwise on numpy arrays.
    """

    kind: str
    value: Callable[[NDArray], NDArray]
    deriv: Callable[[NDArray], NDArray]
    deriv2: Callable[[NDArray], NDArray]
    inverse: Callable[[NDArray], NDArray]

    @property
    def is_probability(self) -> bool:
        return self.kind in ("logistic", "probit")

    @classmethod
    def identity(cls) -> "Link":
        return cls("identity", _id_value, _id_deriv, _id_deriv2, _id_value)

    @classmethod
    def logistic(cls) -> "Link":
        return cls("logistic", special.expit, _logistic_deriv, _logistic_deriv2, special.logit)

    @classmethod
    def probit(cls) -> "Link":
        return cls("probit", special.ndtr, _norm_pdf, _probit_deriv2, special.ndtri)

    @classmethod
    def custom(cls, value, deriv, deriv2, inverse) -> "Link":
        return cls("custom", value=value, deriv=deriv, deriv2=deriv2, inverse=inverse)

    @classmethod
    def from_name(cls, name: str) -> "Link":
        try:
            return {"identity": cls.identity, "logistic": cls.logistic, "probit": cls.probit}[name]()
        except KeyError:
            raise InvalidConfigError(
                f"unknown link {name!r}; expected one of identity, logistic, probit"
            ) from None


def eval_link_vector(link: Link, eta) -> NDArray:
    """Apply ``link.value`` elementwise, rejecting non-finite input."""
    eta = np.asarray(eta, dtype=float)
    if not np.all(np.isfinite(eta)):
        raise NumericError("link evaluated at non-finite index")
    return np.asarray(link.value(eta), dtype=float)


# =============================================================================
# DATA
# =============================================================================


def _frozen(a: NDArray) -> NDArray:
    a = np.array(a, dtype=float, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Dataset:
    """Covariates (intercept in column 0), treatment and outcome for one sample.

    ``treatment_kind`` is ``"binary"`` for the ATE setting and ``"continuous"``
    for the partially linear model.
    """

    X: NDArray
    T: NDArray
    Y: NDArray
    treatment_kind: str = "binary"

    def __post_init__(self):
        X = _frozen(self.X)
        T = _frozen(self.T).ravel()
        Y = _frozen(self.Y).ravel()
        if X.ndim != 2:
            raise DataError("X must be a 2-d array")
        n, p = X.shape
        if n < 1 or p < 2:
            raise DataError(f"need n >= 1 and p >= 2, got n={n}, p={p}")
        if T.shape != (n,) or Y.shape != (n,):
            raise DataError("T and Y must have one entry per row of X")
        if not np.all(X[:, 0] == 1.0):
            raise DataError("column 0 of X must be the intercept (all ones)")
        for name, arr in (("X", X), ("T", T), ("Y", Y)):
            if not np.all(np.isfinite(arr)):
                raise DataError(f"{name} contains non-finite values")
        if self.treatment_kind == "binary":
            if not np.all((T == 0.0) | (T == 1.0)):
                raise DataError("binary treatment must take values in {0, 1}")
        elif self.treatment_kind != "continuous":
            raise InvalidConfigError(f"unknown treatment_kind {self.treatment_kind!r}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "T", T)
        object.__setattr__(self, "Y", Y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.X[idx], self.T[idx], self.Y[idx], self.treatment_kind)

    @classmethod
    def from_covariates(cls, Z, T, Y, treatment_kind: str = "binary") -> "Dataset":
        """Build a dataset from covariates without the intercept column."""
        Z = np.asarray(Z, dtype=float)
        if Z.ndim == 1:
            Z = Z[:, None]
        X = np.column_stack([np.ones(Z.shape[0]), Z])
        return cls(X, T, Y, treatment_kind)


@dataclass(frozen=True)
class SplitData:
    """Disjoint main / auxiliary / training partition of one full sample."""

    main: Dataset
    aux: Dataset
    train: Dataset
    main_idx: NDArray = field(default=None, repr=False)
    aux_idx: NDArray = field(default=None, repr=False)
    train_idx: NDArray = field(default=None, repr=False)

    @property
    def N(self) -> int:
        return self.main.n + self.aux.n + self.train.n


def split_three_way(full: Dataset, fractions: Sequence[float], seed: int) -> SplitData:
    """Randomly partition ``full`` into main, auxiliary and training samples.

    Auxiliary and training sizes are ``floor(fraction * N)``; the remainder
    goes to the main split.
    """
    fr = tuple(float(f) for f in fractions)
    if len(fr) != 3 or any(not (f > 0) for f in fr):
        raise InvalidConfigError("fractions must be three positive numbers")
    if abs(sum(fr) - 1.0) > 1e-12:
        raise InvalidConfigError(f"fractions must sum to 1, got {sum(fr)!r}")
    N = full.n
    if N < 9:
        raise InvalidConfigError(f"need at least 9 observations to split, got {N}")
    n_aux = int(math.floor(fr[1] * N))
    n_tr = int(math.floor(fr[2] * N))
    n_main = N - n_aux - n_tr
    if min(n_main, n_aux, n_tr) < 1:
        raise InvalidConfigError("a split would be empty")
    perm = make_rng(seed, 0x5917).permutation(N)
    main_idx = np.sort(perm[:n_main])
    aux_idx = np.sort(perm[n_main:n_main + n_aux])
    train_idx = np.sort(perm[n_main + n_aux:])
    return SplitData(
        full.subset(main_idx), full.subset(aux_idx), full.subset(train_idx),
        main_idx, aux_idx, train_idx,
    )


# =============================================================================
# TUNING
# =============================================================================


@dataclass(frozen=True)
class TuningParams:
    """Calibration tolerances and bounds; ``None`` means "use the default".

    Tolerance defaults scale as ``c * sqrt(log(dim) / n)``; see
    :func:`default_tolerances`.
    """

    eta_r: Optional[float] = None
    eta_pi1: Optional[float] = None
    eta_pi2: Optional[float] = None
    M_r: Optional[float] = None
    M_pi: Optional[float] = None
    M_gamma: Optional[float] = None
    level: float = 0.95
    c_r: float = 1.0
    c_pi1: float = 2.0
    c_pi2: float = 2.0

    def __post_init__(self):
        for name in ("eta_r", "eta_pi1", "eta_pi2", "M_r", "M_pi", "M_gamma", "c_r", "c_pi1", "c_pi2"):
            v = getattr(self, name)
            if v is not None and not (np.isfinite(v) and v > 0):
                raise InvalidConfigError(f"{name} must be positive, got {v!r}")
        if not (0.0 < self.level < 1.0):
            raise InvalidConfigError(f"level must lie in (0, 1), got {self.level!r}")

    def with_defaults(self, n: int, p: int, **bounds: float) -> "TuningParams":
        """Fill unset tolerances from ``(n, p)`` and unset bounds from ``bounds``."""
        eta_r, eta_pi1, eta_pi2 = default_tolerances(n, p, self.c_r, self.c_pi1, self.c_pi2)
        filled = {
            "eta_r": self.eta_r if self.eta_r is not None else eta_r,
            "eta_pi1": self.eta_pi1 if self.eta_pi1 is not None else eta_pi1,
            "eta_pi2": self.eta_pi2 if self.eta_pi2 is not None else eta_pi2,
        }
        for key in ("M_r", "M_pi", "M_gamma"):
            if getattr(self, key) is None and key in bounds:
                filled[key] = float(bounds[key])
        return replace(self, **filled)


def default_tolerances(n: int, p: int, c_r: float = 1.0, c_pi1: float = 2.0,
                       c_pi2: float = 2.0) -> Tuple[float, float, float]:
    """``(eta_r, eta_pi1, eta_pi2)`` at the usual ``sqrt(log p / n)`` scale."""
    if n < 1 or p < 2:
        raise InvalidConfigError("need n >= 1 and p >= 2")
    base = math.sqrt(math.log(p) / n)
    return c_r * base, c_pi1 * base, c_pi2 * math.sqrt(math.log(max(p, n)) / n)


def default_M_gamma(X_train: NDArray, gamma_hat: NDArray) -> float:
    """1.1 times the largest training index magnitude, clipped to [2, 10]."""
    return float(np.clip(1.1 * np.max(np.abs(X_train @ gamma_hat)), 2.0, 10.0))


# =============================================================================
# CSV
# =============================================================================


def read_csv(path, treatment_kind: str = "binary") -> Dataset:
    """Read ``y, t, x1..x{p-1}`` columns; the intercept is added here."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        for required in ("y", "t"):
            if required not in header:
                raise DataError(f"{path}: missing required column '{required}'")
        xcols = sorted(
            (h for h in header if h.startswith("x") and h[1:].isdigit()), key=lambda h: int(h[1:])
        )
        if not xcols:
            raise DataError(f"{path}: no covariate columns x1..x(p-1)")
        expected = [f"x{j}" for j in range(1, len(xcols) + 1)]
        if xcols != expected:
            raise DataError(f"{path}: covariate columns must be x1..x{len(xcols)} without gaps")
        unknown = set(header) - {"y", "t", *xcols}
        if unknown:
            raise DataError(f"{path}: unknown columns {sorted(unknown)}")
        pos = {h: i for i, h in enumerate(header)}
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {lineno} has {len(row)} fields, expected {len(header)}")
            vals = []
            for col in ["y", "t", *xcols]:
                raw = row[pos[col]].strip()
                try:
                    v = float(raw)
                except ValueError:
                    v = float("nan")
                if raw == "" or not math.isfinite(v):
                    raise DataError(f"{path}: missing or non-numeric value in column '{col}', row {lineno}")
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no data rows")
    arr = np.asarray(rows)
    return Dataset.from_covariates(arr[:, 2:], arr[:, 1], arr[:, 0], treatment_kind)


def write_csv(data: Dataset, path) -> None:
    """Write ``data`` in the schema accepted by :func:`read_csv`."""
    header = ["y", "t"] + [f"x{j}" for j in range(1, data.p)]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(data.n):
            w.writerow([repr(float(data.Y[i])), repr(float(data.T[i]))]
                       + [repr(float(v)) for v in data.X[i, 1:]])

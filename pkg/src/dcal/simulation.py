"""Monte Carlo harness: replicate split -> fit -> calibrate -> estimate.

Each replication draws its data from ``(seed, rep)`` alone, so results do
not depend on worker count, scheduling, or which other cells share a study.
Aggregates are computed from replications sorted by index.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .core_types import DcalError, InvalidConfigError, TuningParams
from .dgp import DgpConfig, DgpTruth, generate
from .estimators import (
    EstimateReport,
    estimate_all,
    estimate_oracle,
    fit_nuisances,
    resolve_tuning,
)
from .or_calibration import build_qp_inputs, oracle_mu
from .ps_calibration import augment_covariates, build_ps_problem, feasibility_report, pad_gamma

FAILURE_REASONS = ("data_error", "config_error", "numeric_error", "solver_error", "other")
MIN_VALID_FRACTION = 0.95
REPORT_SCHEMA_VERSION = 1

log = logging.getLogger("dcal")

CELL_FIELDS = (
    "label", "regime", "n", "p", "estimator", "reps", "failures", "mean_bias", "mc_se_of_bias",
    "rmse", "coverage", "mean_se", "sd_tau", "median_mu_norm_scaled", "median_gamma_shift",
    "fallback_rate",
)


# =============================================================================
# STUDY DEFINITION
# =============================================================================


@dataclass(frozen=True)
class StudyCell:
    """One design point: a DGP, the estimators to run on it, and tuning overrides."""

    config: DgpConfig
    estimators: Tuple[str, ...] = ("DML", "SCal_r", "DCal")
    tuning: TuningParams = field(default_factory=TuningParams)
    label: str = ""

    def name(self) -> str:
        return self.label or f"{self.config.regime}_n{self.config.n}"


@dataclass
class RepResult:
    """Outcome of one replication of one cell."""

    cell: int
    rep: int
    ok: bool
    failure: str = ""
    message: str = ""
    target: float = math.nan
    estimates: Dict[str, Tuple[float, float, float, float]] = field(default_factory=dict)
    diagnostics: Dict[str, float] = field(default_factory=dict)
    checks: Dict[str, float] = field(default_factory=dict)
    seconds: float = 0.0


def rep_seed(seed: int, rep: int) -> int:
    """32-bit seed for the replication's cross-validation folds and synthetic covariates."""
    return int(np.random.SeedSequence([int(seed), int(rep)]).generate_state(1)[0])


def _classify(exc: BaseException) -> str:
    from .core_types import DataError, NumericError
    if isinstance(exc, DataError):
        return "data_error"
    if isinstance(exc, InvalidConfigError):
        return "config_error"
    if isinstance(exc, (NumericError, ArithmeticError, FloatingPointError)):
        return "numeric_error"
    if isinstance(exc, np.linalg.LinAlgError):
        return "solver_error"
    return "other"


def _oracle_checks(split, truth: DgpTruth, nuis, phi, psi, tuning, reports, cfg, sseed) -> dict:
    """Oracle-calibrator and true-propensity feasibility diagnostics."""
    out = {}
    dcal = reports.get("DCal")
    if dcal is None or dcal.or_cal is None:
        return out
    inputs = build_qp_inputs(split.main, split.aux, nuis.beta_hat, nuis.gamma_hat, phi, psi,
                             tuning.M_gamma)
    mu_ora = oracle_mu(truth.pi_star, truth.r_star, inputs.r_hat, inputs.pi_hat)
    cal = dcal.or_cal
    resid = float(np.max(np.abs(inputs.b - inputs.A @ mu_ora)))
    out["mu_ora_norm2"] = float(np.linalg.norm(mu_ora))
    out["mu_ora_feasible"] = float(resid <= cal.eta_r_used and np.max(np.abs(mu_ora)) <= tuning.M_r)
    if truth.gamma_star is not None and phi.is_probability:
        aug = augment_covariates(split.main.X, sseed)
        prob = build_ps_problem(split.main, aug, nuis.beta_hat, nuis.gamma_hat, cal.mu, phi, psi,
                                tuning)
        rep = feasibility_report(pad_gamma(truth.gamma_star, aug.X_tilde.shape[1]), prob)
        out["gamma_star_feasible"] = float(rep.feasible)
    return out


def run_replication(cell: StudyCell, seed: int, rep: int, cell_index: int = 0,
                    oracle_checks: bool = False) -> RepResult:
    """Draw, fit, calibrate and estimate once; failures are recorded, not raised."""
    t0 = time.perf_counter()
    cfg = cell.config
    res = RepResult(cell_index, rep, ok=False)
    try:
        split, truth = generate(cfg, seed, rep)
        phi, psi = cfg.links()
        sseed = rep_seed(seed, rep)
        res.target = truth.tau_star if cfg.is_plm else truth.tau_bar_star
        kinds = tuple(k for k in cell.estimators if k != "Oracle")
        reports: Dict[str, EstimateReport] = {}
        if kinds:
            nuis = fit_nuisances(split.train, phi, psi, plm=cfg.is_plm, seed=sseed)
            tuning = resolve_tuning(split, nuis, phi, cell.tuning, plm=cfg.is_plm)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                reports = estimate_all(split, nuis, phi, psi, tuning, kinds, sseed, plm=cfg.is_plm)
            if oracle_checks and not cfg.is_plm:
                res.checks = _oracle_checks(split, truth, nuis, phi, psi, tuning, reports, cfg, sseed)
        if "Oracle" in cell.estimators and not cfg.is_plm:
            reports["Oracle"] = estimate_oracle(split.main, truth.pi_star, truth.r_star, cell.tuning.level)
        for k in cell.estimators:
            r = reports[k]
            res.estimates[k] = (r.tau_hat, r.se, r.ci[0], r.ci[1])
        main_kind = "DCal_PLM" if cfg.is_plm else ("DCal" if "DCal" in reports else None)
        if main_kind in reports:
            d = reports[main_kind].diagnostics
            res.diagnostics = {
                "mu_norm2": float(d.get("mu_norm2", math.nan)),
                "gamma_shift_l1": float(d.get("gamma_shift_l1", math.nan)),
                "fell_back": float(d.get("fell_back", False)),
                "escalations": float(d.get("escalations", 0)),
            }
        elif "SCal_r" in reports:
            res.diagnostics = {"mu_norm2": float(reports["SCal_r"].diagnostics["mu_norm2"])}
        res.ok = True
    except Exception as exc:  # record-and-continue policy
        res.failure = _classify(exc)
        res.message = f"{type(exc).__name__}: {exc}"
    res.seconds = time.perf_counter() - t0
    return res


def _task(args):
    cell, seed, rep, idx, checks = args
    return run_replication(cell, seed, rep, idx, checks)


# =============================================================================
# AGGREGATION
# =============================================================================


@dataclass(frozen=True)
class CellSummary:
    label: str
    regime: str
    n: int
    p: int
    estimator: str
    reps: int
    failures: int
    mean_bias: float
    mc_se_of_bias: float
    rmse: float
    coverage: float
    mean_se: float
    sd_tau: float
    median_mu_norm_scaled: float
    median_gamma_shift: float
    fallback_rate: float


@dataclass
class SimReport:
    """Per-cell summaries, raw replications and run metadata.

    ``sd_tau`` is the (population) standard deviation of the estimation
    error, so ``rmse^2 = mean_bias^2 + sd_tau^2``.
    """

    cells: List[CellSummary]
    meta: dict
    replications: List[RepResult] = field(default_factory=list, repr=False)
    valid: bool = True
    wall_time_s: float = 0.0

    def cell(self, label: str, estimator: str) -> CellSummary:
        for c in self.cells:
            if c.label == label and c.estimator == estimator:
                return c
        raise KeyError((label, estimator))

    def reps_for(self, cell_index: int) -> List[RepResult]:
        return [r for r in self.replications if r.cell == cell_index]


def _fmean(x) -> float:
    return math.fsum(x) / len(x) if len(x) else math.nan


def summarise(cell: StudyCell, reps: Sequence[RepResult]) -> List[CellSummary]:
    """Aggregate one cell's replications (sorted by index) per estimator."""
    reps = sorted(reps, key=lambda r: r.rep)
    good = [r for r in reps if r.ok]
    failures = len(reps) - len(good)
    n = cell.config.n
    mu = [r.diagnostics["mu_norm2"] for r in good if "mu_norm2" in r.diagnostics]
    shift = [r.diagnostics["gamma_shift_l1"] for r in good
             if np.isfinite(r.diagnostics.get("gamma_shift_l1", math.nan))]
    fb = [r.diagnostics["fell_back"] for r in good if "fell_back" in r.diagnostics]
    out = []
    for k in cell.estimators:
        err = np.array([r.estimates[k][0] - r.target for r in good])
        se = [r.estimates[k][1] for r in good]
        cover = [float(r.estimates[k][2] <= r.target <= r.estimates[k][3]) for r in good]
        m = len(err)
        bias = _fmean(err)
        var0 = _fmean([(e - bias) ** 2 for e in err]) if m else math.nan
        sd1 = math.sqrt(var0 * m / (m - 1)) if m > 1 else math.nan
        out.append(CellSummary(
            label=cell.name(), regime=cell.config.regime, n=n, p=cell.config.p, estimator=k,
            reps=m, failures=failures, mean_bias=bias,
            mc_se_of_bias=sd1 / math.sqrt(m) if m > 1 else math.nan,
            rmse=math.sqrt(_fmean([e * e for e in err])) if m else math.nan,
            coverage=_fmean(cover), mean_se=_fmean(se), sd_tau=math.sqrt(var0) if m else math.nan,
            median_mu_norm_scaled=float(np.median(mu)) / n ** 0.25 if mu else math.nan,
            median_gamma_shift=float(np.median(shift)) if shift else math.nan,
            fallback_rate=_fmean(fb) if fb else math.nan,
        ))
    return out


def run_study(cells: Sequence[StudyCell], reps: int, seed: int, workers: int = 1,
              oracle_checks: bool = False) -> SimReport:
    """Run every cell for ``reps`` replications."""
    cells = list(cells)
    if not cells:
        raise InvalidConfigError("study grid is empty")
    if reps < 2:
        raise InvalidConfigError("need at least 2 replications")
    if workers < 1:
        raise InvalidConfigError("workers must be at least 1")
    t0 = time.perf_counter()
    tasks = [(c, seed, r, i, oracle_checks) for i, c in enumerate(cells) for r in range(reps)]
    results: List[RepResult] = []
    if workers == 1:
        for k, t in enumerate(tasks):
            results.append(_task(t))
            log.debug("replication %d/%d done", k + 1, len(tasks))
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            for k, r in enumerate(ex.map(_task, tasks, chunksize=max(1, len(tasks) // (8 * workers)))):
                results.append(r)
                log.debug("replication %d/%d done", k + 1, len(tasks))
    results.sort(key=lambda r: (r.cell, r.rep))
    summaries: List[CellSummary] = []
    valid = True
    for i, c in enumerate(cells):
        rs = [r for r in results if r.cell == i]
        summaries.extend(summarise(c, rs))
        log.info("cell %s: %d/%d replications succeeded", c.name(), sum(r.ok for r in rs), len(rs))
        if sum(r.ok for r in rs) < MIN_VALID_FRACTION * len(rs):
            valid = False
    meta = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "package_version": __version__,
        "seed": int(seed),
        "reps": int(reps),
        "min_valid_fraction": MIN_VALID_FRACTION,
        "cells": [{"label": c.name(), "config": asdict(c.config), "estimators": list(c.estimators),
                   "tuning": asdict(c.tuning)} for c in cells],
        "failures": {reason: sum(1 for r in results if r.failure == reason) for reason in FAILURE_REASONS},
        "valid": valid,
    }
    return SimReport(summaries, meta, results, valid, time.perf_counter() - t0)


def scaling_check(base: DgpConfig, n_list: Sequence[int], estimator: str = "DCal", reps: int = 500,
                  seed: int = 0, workers: int = 1, tuning: Optional[TuningParams] = None):
    """RMSE per sample size; every split is resized to ``n``.

    Returns ``(table, ratios, report)`` where ``table`` is a list of
    ``(n, rmse)`` and ``ratios`` maps ``(n, 4n)`` to ``rmse(n) / rmse(4n)``.
    """
    n_list = list(n_list)
    if len(n_list) < 2:
        raise InvalidConfigError("scaling check needs at least two sample sizes")
    cells = [StudyCell(replace(base, n=n, n_aux=n, n_tr=n), (estimator,),
                       tuning or TuningParams(), f"{base.regime}_n{n}") for n in n_list]
    report = run_study(cells, reps, seed, workers)
    table = [(c.config.n, report.cell(c.name(), estimator).rmse) for c in cells]
    rm = dict(table)
    ratios = {(n, 4 * n): rm[n] / rm[4 * n] for n in rm if 4 * n in rm}
    return table, ratios, report


# =============================================================================
# EMIT
# =============================================================================


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return repr(v)
    return v


def emit_report(report: SimReport, fmt: str, path, include_timing: bool = False) -> Path:
    """Write one row per (cell, estimator) as CSV or JSON.

    CSV output gets a sidecar ``<path>.meta.json``. Wall-clock time is only
    written when ``include_timing`` is set, keeping default output
    byte-reproducible.
    """
    path = Path(path)
    meta = dict(report.meta)
    if include_timing:
        meta["wall_time_s"] = report.wall_time_s
    rows = [asdict(c) for c in report.cells]
    try:
        if fmt == "json":
            doc = {"meta": meta, "cells": [{k: _jsonable(v) for k, v in r.items()} for r in rows]}
            path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        elif fmt == "csv":
            with path.open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(CELL_FIELDS)
                for r in rows:
                    w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in CELL_FIELDS])
            Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        else:
            raise InvalidConfigError(f"unknown report format {fmt!r}; expected csv or json")
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc
    return path


def read_report(path, fmt: str) -> Tuple[List[CellSummary], dict]:
    """Parse a report written by :func:`emit_report`."""
    path = Path(path)
    ints = {"n", "p", "reps", "failures"}
    strs = {"label", "regime", "estimator"}

    def conv(k, v):
        if k in strs:
            return v
        if k in ints:
            return int(v)
        return float(v)

    if fmt == "json":
        doc = json.loads(path.read_text())
        return [CellSummary(**{k: conv(k, r[k]) for k in CELL_FIELDS}) for r in doc["cells"]], doc["meta"]
    with path.open(newline="") as fh:
        rd = csv.DictReader(fh)
        cells = [CellSummary(**{k: conv(k, r[k]) for k in CELL_FIELDS}) for r in rd]
    meta_path = Path(str(path) + ".meta.json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return cells, meta

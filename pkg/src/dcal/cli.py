"""Command-line entry point: ``dcal {fit,simulate,scaling}``.

Configuration comes from one flat JSON document (``--config``); command-line
flags override file values. Unknown keys are rejected before any
computation. Standard output carries only the written report path; logs go
to standard error at the level given by ``DCAL_LOG``.

Exit codes: 0 success, 2 invalid data or configuration, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import math
import os
import sys
from dataclasses import fields
from pathlib import Path
from typing import List, Optional, Sequence

from . import __version__
from .core_types import DataError, InvalidConfigError, Link, NumericError, TuningParams, read_csv, split_three_way
from .dgp import REGIMES, DgpConfig
from .estimators import estimate_all, fit_nuisances, resolve_tuning
from .simulation import StudyCell, emit_report, run_study, scaling_check

log = logging.getLogger("dcal")

EXIT_OK, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3
ESTIMATOR_FLAGS = {"dml": "DML", "scal": "SCal_r", "dcal": "DCal", "dcal-plm": "DCal_PLM", "oracle": "Oracle"}
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}

TUNING_KEYS = ("eta_r", "eta_pi1", "eta_pi2", "M_r", "M_pi", "M_gamma", "c_r", "c_pi1", "c_pi2")
DGP_KEYS = tuple(f.name for f in fields(DgpConfig))
COMMON_KEYS = ("seed", "estimators", "level", "out", "format") + TUNING_KEYS
FIT_KEYS = COMMON_KEYS + ("data", "fractions", "treatment", "ps_link", "or_link")
SIM_KEYS = COMMON_KEYS + DGP_KEYS + ("reps", "workers", "include_timing")
SCALING_KEYS = SIM_KEYS + ("n_list",)
ALLOWED = {"fit": FIT_KEYS, "simulate": SIM_KEYS, "scaling": SCALING_KEYS}


# =============================================================================
# CONFIGURATION
# =============================================================================


def load_config(path: Optional[str], command: str) -> dict:
    """Read and key-check a flat JSON configuration document."""
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise InvalidConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise InvalidConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise InvalidConfigError(f"config {path} must be a JSON object")
    unknown = sorted(set(doc) - set(ALLOWED[command]))
    if unknown:
        raise InvalidConfigError(f"unknown config keys for '{command}': {unknown}")
    for k, v in doc.items():
        if isinstance(v, dict):
            raise InvalidConfigError(f"config key {k!r} must be flat (no nested objects)")
    return doc


def merge_flags(cfg: dict, args: argparse.Namespace) -> dict:
    """Flags that were given override file values."""
    out = dict(cfg)
    for key in ("seed", "workers", "level", "out", "format", "data", "reps"):
        v = getattr(args, key, None)
        if v is not None:
            out[key] = v
    if getattr(args, "estimator", None):
        out["estimators"] = list(args.estimator)
    return out


def _estimators(cfg: dict, default: Sequence[str]) -> List[str]:
    raw = cfg.get("estimators", list(default))
    if isinstance(raw, str):
        raw = [raw]
    out = []
    for name in raw:
        if name not in ESTIMATOR_FLAGS:
            raise InvalidConfigError(f"unknown estimator {name!r}; expected one of {', '.join(ESTIMATOR_FLAGS)}")
        out.append(ESTIMATOR_FLAGS[name])
    return out


def _tuning(cfg: dict) -> TuningParams:
    kw = {k: float(cfg[k]) for k in TUNING_KEYS if k in cfg and cfg[k] is not None}
    if "level" in cfg:
        kw["level"] = float(cfg["level"])
    return TuningParams(**kw)


def _seed(cfg: dict) -> int:
    seed = cfg.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or not (0 <= seed < 2 ** 64):
        raise InvalidConfigError(f"seed must be an unsigned 64-bit integer, got {seed!r}")
    return seed


def _format(cfg: dict, default: str) -> str:
    fmt = cfg.get("format", default)
    if fmt not in ("csv", "json"):
        raise InvalidConfigError(f"unknown format {fmt!r}; expected csv or json")
    return fmt


def _out(cfg: dict, default: str) -> Path:
    return Path(cfg.get("out", default))


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if hasattr(v, "item"):
        v = v.item()
    if isinstance(v, float) and not math.isfinite(v):
        return repr(v)
    return v


def _dgp_configs(cfg: dict) -> List[DgpConfig]:
    """Cartesian grid over list-valued ``regime`` and ``n``; other keys are scalars.

    ``n_aux`` and ``n_tr`` default to ``n`` when unset.
    """
    regimes = cfg.get("regime", DgpConfig.regime)
    ns = cfg.get("n", DgpConfig.n)
    regimes = regimes if isinstance(regimes, list) else [regimes]
    ns = ns if isinstance(ns, list) else [ns]
    base = {k: cfg[k] for k in DGP_KEYS if k in cfg and k not in ("regime", "n")}
    for k, v in base.items():
        if isinstance(v, list):
            raise InvalidConfigError(f"config key {k!r} must be a scalar")
    out = []
    for regime, n in itertools.product(regimes, ns):
        if regime not in REGIMES:
            raise InvalidConfigError(f"unknown regime {regime!r}; expected one of {', '.join(REGIMES)}")
        kw = dict(base, regime=regime, n=n)
        kw.setdefault("n_aux", n)
        kw.setdefault("n_tr", n)
        try:
            out.append(DgpConfig(**kw))
        except TypeError as exc:
            raise InvalidConfigError(f"bad DGP configuration: {exc}") from None
    return out


# =============================================================================
# COMMANDS
# =============================================================================


def cmd_fit(cfg: dict) -> Path:
    """Split a CSV data set, fit the nuisances and write estimate reports."""
    if "data" not in cfg:
        raise InvalidConfigError("fit needs a data file (--data or config key 'data')")
    treatment = cfg.get("treatment", "binary")
    if treatment not in ("binary", "continuous"):
        raise InvalidConfigError(f"treatment must be binary or continuous, got {treatment!r}")
    plm = treatment == "continuous"
    seed = _seed(cfg)
    kinds = _estimators(cfg, ["dcal-plm"] if plm else ["dcal"])
    if "Oracle" in kinds:
        raise InvalidConfigError("the oracle estimator needs the true nuisances and is simulation-only")
    tuning = _tuning(cfg)
    phi = Link.from_name(cfg.get("ps_link", "identity" if plm else "logistic"))
    psi = Link.from_name(cfg.get("or_link", "identity"))
    fractions = cfg.get("fractions", [1 / 3, 1 / 3, 1 / 3])
    data = read_csv(cfg["data"], treatment)
    log.info("read %d rows, %d covariates from %s", data.n, data.p - 1, cfg["data"])
    split = split_three_way(data, fractions, seed)
    nuis = fit_nuisances(split.train, phi, psi, plm=plm, seed=seed)
    resolved = resolve_tuning(split, nuis, phi, tuning, plm=plm)
    reports = estimate_all(split, nuis, phi, psi, resolved, kinds, seed, plm=plm)
    out = _out(cfg, "dcal_fit.json")
    fmt = _format(cfg, "json")
    meta = {
        "package_version": __version__,
        "seed": seed,
        "data": str(cfg["data"]),
        "split_sizes": [split.main.n, split.aux.n, split.train.n],
        "tuning": {k: getattr(resolved, k) for k in TUNING_KEYS + ("level",)},
        "lambda_r": nuis.lam_r,
        "lambda_pi": nuis.lam_pi,
    }
    if fmt == "json":
        doc = {"meta": meta, "estimates": [reports[k].to_dict() for k in kinds]}
        out.write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")
    else:
        with out.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["estimator", "tau_hat", "se", "ci_lo", "ci_hi", "n_used"])
            for k in kinds:
                r = reports[k]
                w.writerow([k, repr(r.tau_hat), repr(r.se), repr(r.ci[0]), repr(r.ci[1]), r.n_used])
    return out


def _cells(cfg: dict) -> List[StudyCell]:
    tuning = _tuning(cfg)
    cells = []
    for dgp in _dgp_configs(cfg):
        kinds = _estimators(cfg, ["dcal-plm"] if dgp.is_plm else ["dml", "scal", "dcal"])
        cells.append(StudyCell(dgp, tuple(kinds), tuning))
    return cells


def _reps_workers(cfg: dict):
    reps, workers = cfg.get("reps", 100), cfg.get("workers", 1)
    if not isinstance(reps, int) or not isinstance(workers, int):
        raise InvalidConfigError("reps and workers must be integers")
    return reps, workers


def cmd_simulate(cfg: dict) -> Path:
    """Run a Monte Carlo study over the configured grid."""
    cells = _cells(cfg)
    reps, workers = _reps_workers(cfg)
    report = run_study(cells, reps, _seed(cfg), workers)
    fmt = _format(cfg, "csv")
    out = _out(cfg, f"dcal_sim.{fmt}")
    emit_report(report, fmt, out, include_timing=bool(cfg.get("include_timing", False)))
    if not report.valid:
        log.warning("fewer than 95%% of replications succeeded in some cell; report marked invalid")
    return out


def cmd_scaling(cfg: dict) -> Path:
    """RMSE across sample sizes for a single estimator."""
    n_list = cfg.get("n_list", [200, 800])
    if not isinstance(n_list, list):
        raise InvalidConfigError("n_list must be a list of sample sizes")
    base_cfg = {k: v for k, v in cfg.items() if k != "n"}
    base = _dgp_configs(dict(base_cfg, n=n_list[0] if n_list else DgpConfig.n))[0]
    kinds = _estimators(cfg, ["dcal-plm"] if base.is_plm else ["dcal"])
    if len(kinds) != 1:
        raise InvalidConfigError("scaling takes exactly one estimator")
    reps, workers = _reps_workers(cfg)
    table, ratios, report = scaling_check(base, n_list, kinds[0], reps, _seed(cfg), workers, _tuning(cfg))
    report.meta["rmse_by_n"] = [[n, r] for n, r in table]
    report.meta["rmse_ratio_n_4n"] = [[a, b, v] for (a, b), v in sorted(ratios.items())]
    fmt = _format(cfg, "csv")
    out = _out(cfg, f"dcal_scaling.{fmt}")
    emit_report(report, fmt, out, include_timing=bool(cfg.get("include_timing", False)))
    return out


COMMANDS = {"fit": cmd_fit, "simulate": cmd_simulate, "scaling": cmd_scaling}


# =============================================================================
# ENTRY POINT
# =============================================================================


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON configuration file")
    common.add_argument("--seed", type=int, help="unsigned 64-bit seed")
    common.add_argument("--estimator", action="append", choices=sorted(ESTIMATOR_FLAGS),
                        help="estimator to run (repeatable)")
    common.add_argument("--out", help="output path")
    common.add_argument("--format", choices=("csv", "json"), help="output format")
    common.add_argument("--level", type=float, help="confidence level of the intervals")
    common.add_argument("--workers", type=int, help="worker processes (simulation only)")
    parser = argparse.ArgumentParser(prog="dcal", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"dcal {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    fit = sub.add_parser("fit", parents=[common], help="estimate from a CSV data set")
    fit.add_argument("--data", help="CSV with columns y, t, x1..")
    for name in ("simulate", "scaling"):
        p = sub.add_parser(name, parents=[common], help=f"run a {name} study")
        p.add_argument("--reps", type=int, help="replications per cell")
    return parser


def _setup_logging() -> None:
    level = LOG_LEVELS.get(os.environ.get("DCAL_LOG", "warn").lower(), logging.WARNING)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("dcal %(levelname)s: %(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(level)
    log.propagate = False


def main(argv: Optional[Sequence[str]] = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = merge_flags(load_config(args.config, args.command), args)
        out = COMMANDS[args.command](cfg)
    except (DataError, InvalidConfigError) as exc:
        print(f"dcal: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"dcal: error: file not found: {exc.filename}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"dcal: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

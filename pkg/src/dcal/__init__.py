"""Double-calibration estimators for average treatment effects in high dimensions."""

__version__ = "0.1.0"

from .core_types import (  # noqa: E402
    DataError,
    Dataset,
    DcalError,
    InvalidConfigError,
    Link,
    NumericError,
    SplitData,
    TuningParams,
    make_rng,
    read_csv,
    split_three_way,
    write_csv,
)
from .dgp import REGIMES, DgpConfig, DgpTruth, generate  # noqa: E402
from .estimators import (  # noqa: E402
    ESTIMATOR_KINDS,
    EstimateReport,
    estimate_all,
    estimate_dcal,
    estimate_dcal_plm,
    estimate_dml,
    estimate_oracle,
    estimate_scal_r,
    fit_nuisances,
    resolve_tuning,
)
from .simulation import SimReport, StudyCell, emit_report, run_study, scaling_check  # noqa: E402

__all__ = [
    "DataError", "Dataset", "DcalError", "InvalidConfigError", "Link", "NumericError", "SplitData",
    "TuningParams", "make_rng", "read_csv", "split_three_way", "write_csv", "REGIMES", "DgpConfig",
    "DgpTruth", "generate", "ESTIMATOR_KINDS", "EstimateReport", "estimate_all", "estimate_dcal",
    "estimate_dcal_plm", "estimate_dml", "estimate_oracle", "estimate_scal_r", "fit_nuisances",
    "resolve_tuning", "SimReport", "StudyCell", "emit_report", "run_study", "scaling_check",
]

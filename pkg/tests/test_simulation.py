import json
import math

import numpy as np
import pytest

import dcal.simulation as sim
from dcal.core_types import InvalidConfigError, NumericError
from dcal.dgp import DgpConfig
from dcal.simulation import (
    CELL_FIELDS,
    RepResult,
    StudyCell,
    emit_report,
    read_report,
    run_study,
    scaling_check,
    summarise,
)

SMALL = DgpConfig("sparse_or_dense_ps", n=80, n_aux=80, n_tr=80, p=10)
# constant outcome regression: the oracle's error is pure noise around the target
FLAT = DgpConfig("both_sparse", n=200, n_aux=10, n_tr=10, p=3, s_r=0, s_pi=2)


@pytest.fixture(scope="module")
def small_report():
    return run_study([StudyCell(SMALL, ("DML", "SCal_r", "DCal"))], 3, 11)


def test_coverage_counting_two_reps():
    cell = StudyCell(SMALL, ("DCal",))
    reps = [
        RepResult(0, 0, True, target=1.0, estimates={"DCal": (1.1, 0.1, 0.9, 1.3)}),
        RepResult(0, 1, True, target=1.0, estimates={"DCal": (1.5, 0.1, 1.3, 1.7)}),
    ]
    (s,) = summarise(cell, reps)
    assert s.coverage == 0.5
    assert math.isclose(s.mean_bias, 0.3)
    assert math.isclose(s.rmse, math.sqrt((0.01 + 0.25) / 2))
    assert math.isclose(s.mc_se_of_bias, math.sqrt(0.08) / math.sqrt(2))


def test_rmse_decomposition(small_report):
    for s in small_report.cells:
        assert math.isclose(s.rmse ** 2, s.mean_bias ** 2 + s.sd_tau ** 2, rel_tol=1e-12)
        assert 0 <= s.coverage <= 1


def test_worker_count_invariance(small_report):
    again = run_study([StudyCell(SMALL, ("DML", "SCal_r", "DCal"))], 3, 11, workers=2)
    assert again.cells == small_report.cells
    assert again.meta == small_report.meta


def test_report_round_trip(small_report, tmp_path):
    for fmt in ("csv", "json"):
        path = emit_report(small_report, fmt, tmp_path / f"r.{fmt}")
        cells, meta = read_report(path, fmt)
        assert cells == small_report.cells
        assert meta["seed"] == 11 and meta["reps"] == 3
    header = (tmp_path / "r.csv").read_text().splitlines()[0]
    assert header == ",".join(CELL_FIELDS)
    assert "wall_time_s" not in json.loads((tmp_path / "r.json").read_text())["meta"]


def test_empty_report_writes_header(tmp_path):
    rep = sim.SimReport([], {"seed": 0}, [], True, 0.0)
    path = emit_report(rep, "csv", tmp_path / "e.csv")
    assert path.read_text() == ",".join(CELL_FIELDS) + "\n"


def test_emit_errors(small_report, tmp_path):
    with pytest.raises(InvalidConfigError):
        emit_report(small_report, "xml", tmp_path / "r.xml")
    with pytest.raises(OSError, match="nowhere"):
        emit_report(small_report, "json", tmp_path / "nowhere" / "r.json")


def test_study_argument_errors():
    with pytest.raises(InvalidConfigError):
        run_study([], 5, 0)
    with pytest.raises(InvalidConfigError):
        run_study([StudyCell(SMALL)], 1, 0)
    with pytest.raises(InvalidConfigError):
        scaling_check(SMALL, [100], reps=2)


def test_failures_are_recorded(monkeypatch):
    real = sim.generate

    def flaky(cfg, seed, rep=0):
        if rep == 1:
            raise NumericError("synthetic failure")
        return real(cfg, seed, rep)

    monkeypatch.setattr(sim, "generate", flaky)
    rep = run_study([StudyCell(FLAT, ("Oracle",))], 4, 0)
    assert rep.meta["failures"]["numeric_error"] == 1
    assert rep.cells[0].reps == 3 and rep.cells[0].failures == 1
    assert not rep.valid
    bad = [r for r in rep.replications if not r.ok]
    assert bad[0].rep == 1 and "synthetic failure" in bad[0].message


def test_noiseless_oracle_is_exact():
    rep = run_study([StudyCell(DgpConfig("sparse_or_dense_ps", n=100, n_aux=10, n_tr=10, p=6,
                                         noise_sd=0.0), ("Oracle",))], 5, 3)
    assert rep.cells[0].rmse <= 1e-12


def test_oracle_rmse_scaling():
    _, ratios, _ = scaling_check(FLAT, [100, 400], estimator="Oracle", reps=1000, seed=5)
    assert 1.7 <= ratios[(100, 400)] <= 2.3


def test_oracle_coverage():
    rep = run_study([StudyCell(FLAT, ("Oracle",))], 2000, 9)
    assert 0.935 <= rep.cells[0].coverage <= 0.965


def test_seed_changes_results():
    a = run_study([StudyCell(FLAT, ("Oracle",))], 3, 1)
    b = run_study([StudyCell(FLAT, ("Oracle",))], 3, 2)
    assert a.cells[0].mean_bias != b.cells[0].mean_bias
    assert np.isfinite(a.cells[0].rmse)

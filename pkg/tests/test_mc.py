import json

import numpy as np
import pytest

from trialcea.bayes import BayesIvConfig
from trialcea.exceptions import ValidationError
from trialcea.mc import (
    McOptions,
    aggregate_records,
    evaluate_checks,
    report_json,
    report_to_dict,
    run_mc,
    toy_normal_mean_mc,
    validate_methods,
)
from trialcea.simulate import MissingnessConfig, reference_dgp, reference_mar_dgp

SMALL = reference_dgp(n=400)
FAST_OPTS = McOptions(mi_m=5, mi_cycles=2)


class TestValidation:
    def test_unknown_estimator(self):
        with pytest.raises(ValidationError):
            validate_methods([("magic", "cca")])

    def test_bayes_with_mi_rejected(self):
        with pytest.raises(ValidationError):
            validate_methods([("bayes", "mi")])

    def test_bayes_missing_requires_bayes_estimator(self):
        with pytest.raises(ValidationError):
            validate_methods([("itt", "bayes")])

    def test_minimum_replicates(self):
        with pytest.raises(ValidationError):
            run_mc(SMALL, [("itt", "cca")], replicates=1)


class TestRunMc:
    def test_basic_cells_and_log(self):
        report = run_mc(SMALL, [("itt", "cca"), ("cace-3sls", "cca")], replicates=8, seed=1)
        assert {c["estimator"] for c in report.cells} == {"itt", "cace-3sls"}
        assert {c["parameter"] for c in report.cells} == {"cost", "qaly", "inb"}
        itt_cost = report.cell("itt", "cca", "cost")
        assert itt_cost["truth"] == pytest.approx(600.0)
        cace_cost = report.cell("cace-3sls", "cca", "cost")
        assert cace_cost["truth"] == pytest.approx(1000.0)
        assert len(report.replicate_log) == 8 * 2 * 3

    def test_deterministic_and_order_independent(self):
        a = run_mc(SMALL, [("cace-3sls", "cca")], replicates=6, seed=9)
        b = run_mc(SMALL, [("cace-3sls", "cca")], replicates=6, seed=9)
        assert report_to_dict(a) == report_to_dict(b)

    def test_workers_do_not_change_results(self):
        a = run_mc(SMALL, [("cace-3sls", "cca")], replicates=6, seed=9, workers=1)
        b = run_mc(SMALL, [("cace-3sls", "cca")], replicates=6, seed=9, workers=3)
        assert report_to_dict(a) == report_to_dict(b)

    def test_summary_recomputable_from_log(self):
        report = run_mc(SMALL, [("itt", "cca")], replicates=10, seed=2)
        truths = {"itt": {p: report.cell("itt", "cca", p)["truth"] for p in ("cost", "qaly", "inb")}}
        recomputed = aggregate_records(report.replicate_log, truths, 10)
        assert recomputed == report.cells

    def test_failures_counted_not_imputed(self):
        # heavy MCAR missingness on a tiny trial: some replicates have no
        # complete cases and the pipelines fail for them
        cfg = reference_dgp(
            n=14,
            missing=MissingnessConfig(mechanism="MCAR", models={"r1": {"const": 0.4}}),
        )
        with pytest.warns(UserWarning):  # tiny trials also trip the weak-F warning
            report = run_mc(cfg, [("cace-3sls", "cca")], replicates=12, seed=3)
        cells = [c for c in report.cells if c["parameter"] == "cost"]
        assert cells, "every replicate failed; cannot check accounting"
        cell = cells[0]
        assert cell["n_failures"] > 0
        assert cell["n_reps"] + cell["n_failures"] == 12
        assert cell["degraded"]
        errors = [r for r in report.replicate_log if not r["ok"]]
        assert errors and all(r["error"] for r in errors)

    def test_mi_and_ipw_pipelines_run(self):
        cfg = reference_mar_dgp(n=500)
        report = run_mc(
            cfg,
            [("cace-3sls", "cca"), ("cace-3sls", "mi"), ("cace-3sls", "ipw"), ("itt", "mi")],
            replicates=3,
            seed=4,
            options=FAST_OPTS,
        )
        for estimator, missing in [("cace-3sls", "mi"), ("cace-3sls", "ipw"), ("itt", "mi")]:
            cell = report.cell(estimator, missing, "cost")
            assert cell["n_reps"] == 3
            assert np.isfinite(cell["mean_estimate"])

    def test_cace_2sls_has_no_inb_cell(self):
        report = run_mc(SMALL, [("cace-2sls", "cca")], replicates=3, seed=5)
        with pytest.raises(KeyError):
            report.cell("cace-2sls", "cca", "inb")
        assert report.cell("cace-2sls", "cca", "cost")["n_reps"] == 3

    def test_bayes_pipeline_smoke(self):
        opts = McOptions(
            bayes=BayesIvConfig(chains=2, iterations=600, burnin=300, check_convergence=False)
        )
        report = run_mc(SMALL, [("bayes", "cca")], replicates=2, seed=6, options=opts)
        cell = report.cell("bayes", "cca", "cost")
        assert cell["n_reps"] == 2


class TestToyCalibration:
    def test_coverage_near_nominal(self):
        cell = toy_normal_mean_mc(replicates=1000, seed=7)
        # 99% binomial band around 0.95 with 1000 replicates
        half_width = 2.576 * np.sqrt(0.95 * 0.05 / 1000)
        assert abs(cell["coverage"] - 0.95) < half_width
        assert abs(cell["bias"]) < 3 * cell["mc_se_bias"]


class TestReportJson:
    def test_byte_identical_reruns(self, tmp_path):
        report = run_mc(SMALL, [("itt", "cca")], replicates=4, seed=8)
        f1, f2 = tmp_path / "a.json", tmp_path / "b.json"
        report_json(report, f1)
        report_json(run_mc(SMALL, [("itt", "cca")], replicates=4, seed=8), f2)
        assert f1.read_bytes() == f2.read_bytes()

    def test_roundtrip_parse(self, tmp_path):
        report = run_mc(SMALL, [("itt", "cca")], replicates=4, seed=8)
        path = tmp_path / "r.json"
        report_json(report, path)
        parsed = json.loads(path.read_text())
        assert parsed["cells"] == json.loads(json.dumps(report_to_dict(report)))["cells"]
        assert parsed["replicates"] == 4

    def test_empty_method_list(self, tmp_path):
        report = run_mc(SMALL, [], replicates=2, seed=1)
        path = tmp_path / "empty.json"
        report_json(report, path)
        parsed = json.loads(path.read_text())
        assert parsed["cells"] == []


class TestChecks:
    def test_bounds_evaluated(self):
        report = run_mc(SMALL, [("cace-3sls", "cca")], replicates=6, seed=10)
        ok = evaluate_checks(
            report,
            [{"estimator": "cace-3sls", "missing": "cca", "parameter": "cost", "metric": "coverage", "min": 0.0}],
        )
        assert ok == []
        bad = evaluate_checks(
            report,
            [{"estimator": "cace-3sls", "missing": "cca", "parameter": "cost", "metric": "coverage", "min": 1.1}],
        )
        assert bad and bad[0]["reason"] == "out of bounds"

    def test_missing_cell_reported(self):
        report = run_mc(SMALL, [("itt", "cca")], replicates=3, seed=11)
        failures = evaluate_checks(
            report,
            [{"estimator": "pp", "missing": "cca", "parameter": "cost", "metric": "bias"}],
        )
        assert failures[0]["reason"] == "cell not found"

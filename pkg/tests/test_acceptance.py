"""Acceptance suite.

Each test prints one PASS/FAIL line per criterion (run pytest with -s to
see them live).  The statistical criteria run the full replication counts,
so this module dominates the suite's runtime; the quick algebraic checks
come first.
"""

import time
import warnings

import numpy as np
import pytest
from dataclasses import replace

from conftest import random_iv_dataset
from trialcea.bayes import BayesIvConfig, fit_bayes_iv
from trialcea.cea import inb
from trialcea.cli import main as cli_main
from trialcea.iv import CaceEstimate, itt_sur, three_sls, tsls, wald_cace
from trialcea.linreg import fgls_system, ols
from trialcea.mc import run_mc, toy_normal_mean_mc
from trialcea.missing import (
    default_pom_spec,
    fit_pom,
    ipw_weights,
    mi_impute,
    pattern_mixture_offset,
    pool_cace,
    rubin_pool,
)
from trialcea.simulate import apply_missingness, generate_trial, reference_dgp, reference_mar_dgp

Z95 = 1.959963984540054


def check(criterion, ok, detail):
    print(f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}")
    assert ok, f"{criterion}: {detail}"


# ---------------------------------------------------------------------------
# 1. Algebraic identities
# ---------------------------------------------------------------------------


def test_1a_sur_identical_regressors_equals_ols():
    rng = np.random.default_rng(100)
    worst = 0.0
    for _ in range(10):
        n = 60
        x = np.column_stack([np.ones(n), rng.normal(size=(n, 2))])
        y1 = x @ rng.normal(size=3) + rng.normal(size=n)
        y2 = x @ rng.normal(size=3) + rng.normal(size=n)
        sur = fgls_system([(x, y1), (x, y2)])
        for i, y in enumerate((y1, y2)):
            ref = ols(x, y).params
            rel = np.max(np.abs(sur.params[i] - ref) / np.maximum(np.abs(ref), 1e-12))
            worst = max(worst, rel)
    check("1a SUR(identical regressors) == per-equation OLS", worst < 1e-8, f"max rel err {worst:.2e}")


def test_1b_tsls_without_covariates_equals_wald():
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(25):
        ds = random_iv_dataset(rng, n=int(rng.integers(20, 100)))
        fit = tsls(ds, "y1")
        worst = max(worst, abs(fit.params[1] - wald_cace(ds.z, ds.d, ds.y1)))
    check("1b 2sls(no covariates) == Wald estimand", worst < 1e-10, f"max abs err {worst:.2e}")


def test_1c_three_sls_equals_per_outcome_tsls():
    ds, _ = generate_trial(reference_dgp(n=2000, seed=102))
    est = three_sls(ds, covariates=["eq5d0"])
    worst = 0.0
    for i, outcome in enumerate(("y1", "y2")):
        ref = tsls(ds, outcome, covariates=["eq5d0"]).params[1]
        worst = max(worst, abs(est.theta[i] - ref) / abs(ref))
    check("1c just-identified 3sls == per-outcome 2sls", worst < 1e-8, f"max rel err {worst:.2e}")


def test_1d_rubin_toy_case():
    pooled = rubin_pool([[1.0], [3.0]], [[[1.0]], [[1.0]]])
    t = pooled.total[0, 0]
    ok = pooled.estimate[0] == 2.0 and pooled.within[0, 0] == 1.0 and pooled.between[0, 0] == 2.0 and t == 4.0
    check("1d Rubin toy case M=2 gives T=4", ok, f"Q={pooled.estimate[0]}, W={pooled.within[0,0]}, B={pooled.between[0,0]}, T={t}")


def test_1e_inb_identity_and_variance():
    cov = np.array([[250_000.0, 4.0], [4.0, 0.0009]])
    est = CaceEstimate(theta=np.array([800.0, 0.07]), cov=cov, estimand="CACE", nobs=100)
    lam = 25_000.0
    res = inb(est, lam)
    identity = res.inb == lam * 0.07 - 800.0
    expected_var = lam**2 * cov[1, 1] + cov[0, 0] - 2 * lam * cov[0, 1]
    variance = abs(res.inb_se**2 - expected_var) <= 1e-12 * expected_var
    check("1e INB identity and variance formula", identity and variance, f"inb={res.inb}, var err={res.inb_se**2 - expected_var:.2e}")


# ---------------------------------------------------------------------------
# 2. Estimator validity on the confounded-switching reference scenario
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def reference_mc():
    start = time.time()
    report = run_mc(
        reference_dgp(n=2000),
        [("cace-3sls", "cca"), ("pp", "cca"), ("itt", "cca")],
        replicates=1000,
        seed=20_240,
    )
    elapsed = time.time() - start
    print(f"\n[criterion 2] reference scenario, 1000 replicates in {elapsed:.1f}s")
    return report, elapsed


def test_2_runtime(reference_mc):
    _, elapsed = reference_mc
    check("2 runtime target", elapsed < 120.0, f"{elapsed:.1f}s < 120s")


def test_2a_three_sls_unbiased_with_coverage(reference_mc):
    report, _ = reference_mc
    for param in ("cost", "qaly"):
        cell = report.cell("cace-3sls", "cca", param)
        z = cell["bias"] / cell["mc_se_bias"]
        check(f"2a 3sls {param} bias within 3 MC SEs", abs(z) < 3.0, f"bias={cell['bias']:.4g}, z={z:.2f}")
        check(
            f"2a 3sls {param} coverage in [93%, 97%]",
            0.93 <= cell["coverage"] <= 0.97,
            f"coverage={cell['coverage']:.3f}",
        )


def test_2b_pp_directionally_biased(reference_mc):
    report, _ = reference_mc
    # prognosis-driven switching makes per-protocol understate everything
    for param in ("cost", "qaly", "inb"):
        cell = report.cell("pp", "cca", param)
        z = cell["bias"] / cell["mc_se_bias"]
        check(f"2b PP {param} understates by > 5 MC SEs", z < -5.0, f"z={z:.1f}")


def test_2c_itt_equals_share_times_cace(reference_mc):
    report, _ = reference_mc
    share = 0.6
    by_rep = {}
    for rec in report.replicate_log:
        if rec["ok"] and rec["parameter"] in ("cost", "qaly"):
            key = (rec["replicate"], rec["parameter"])
            by_rep.setdefault(key, {})[rec["estimator"]] = rec["estimate"]
    for param in ("cost", "qaly"):
        diffs = [
            v["itt"] - share * v["cace-3sls"]
            for (rep, p), v in by_rep.items()
            if p == param and "itt" in v and "cace-3sls" in v
        ]
        diffs = np.array(diffs)
        z = diffs.mean() / (diffs.std(ddof=1) / np.sqrt(diffs.size))
        check(f"2c ITT == 0.6 x CACE for {param} within 3 MC SEs", abs(z) < 3.0, f"z={z:.2f} over {diffs.size} reps")


# ---------------------------------------------------------------------------
# 3. Missing-data validity on the MAR scenario
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def mar_mc():
    """Bespoke replication loop sharing the imputation work with the donor
    audit, which must inspect every imputed cell of every replicate."""
    reps = 1000
    lam = 20_000.0
    base = reference_mar_dgp(n=2000)
    truth = np.array([1000.0, 0.1])
    truth_inb = lam * truth[1] - truth[0]
    states = [s.generate_state(2) for s in np.random.SeedSequence(20_241).spawn(reps)]
    rows = {"cca": [], "mi": [], "ipw": []}
    covers = {"mi": [], "ipw": []}
    inb_cover = []
    donor_violations = 0
    imputed_cells = 0
    start = time.time()
    for rep in range(reps):
        cfg = replace(base, seed=int(states[rep][0]))
        ds, _ = generate_trial(cfg)
        dsm = apply_missingness(ds, cfg)
        rows["cca"].append(three_sls(dsm, covariates=["eq5d0"]).theta)

        # one incomplete variable: each chained cycle refits the same model
        # on the same complete rows, so a short chain is exact
        imp = mi_impute(dsm, m=50, k=5, cycles=3, seed=int(states[rep][1]))
        miss = imp.imputed["y1"]
        imputed_cells += int(miss.sum()) * imp.m
        for d in imp.datasets:
            for arm in (0, 1):
                arm_rows = dsm.z == arm
                observed = np.unique(dsm.y1[arm_rows & ~miss])
                values = d.y1[arm_rows & miss]
                donor_violations += int((~np.isin(values, observed)).sum())
        fits = [three_sls(d, covariates=["eq5d0"]) for d in imp.datasets]
        pooled = pool_cace(fits)
        rows["mi"].append(pooled.theta)
        ci = pooled.conf_int()
        covers["mi"].append([(ci[i, 0] <= truth[i] <= ci[i, 1]) for i in range(2)])
        pooled_inb = rubin_pool(
            [[lam * f.theta[1] - f.theta[0]] for f in fits],
            [[[lam**2 * f.cov[1, 1] + f.cov[0, 0] - 2 * lam * f.cov[0, 1]]] for f in fits],
        )
        lo, hi = pooled_inb.conf_int()[0]
        inb_cover.append(lo <= truth_inb <= hi)

        pom = fit_pom(dsm, default_pom_spec(dsm, order=("r0", "r2", "r1")))
        with warnings.catch_warnings():
            # large inverse weights are expected under this selection strength
            warnings.simplefilter("ignore", UserWarning)
            est = three_sls(dsm, covariates=["eq5d0"], weights=ipw_weights(dsm, pom))
        rows["ipw"].append(est.theta)
        se = est.se()
        covers["ipw"].append([abs(est.theta[i] - truth[i]) <= Z95 * se[i] for i in range(2)])
    elapsed = time.time() - start
    print(f"\n[criterion 3] MAR scenario, {reps} replicates in {elapsed:.1f}s")
    return rows, covers, inb_cover, donor_violations, imputed_cells, truth, elapsed


def test_3_runtime(mar_mc):
    *_, elapsed = mar_mc
    check("3 runtime target", elapsed < 600.0, f"{elapsed:.1f}s < 600s")


def test_3a_cca_biased_mi_ipw_valid(mar_mc):
    rows, covers, inb_cover, _, _, truth, _ = mar_mc
    labels = ("cost", "qaly")
    cca = np.array(rows["cca"])
    for i, label in enumerate(labels):
        z = (cca[:, i].mean() - truth[i]) / (cca[:, i].std(ddof=1) / np.sqrt(len(cca)))
        check(f"3a CCA {label} bias exceeds 5 MC SEs", abs(z) > 5.0, f"z={z:.1f}")
    for method in ("mi", "ipw"):
        est = np.array(rows[method])
        cov = np.array(covers[method])
        for i, label in enumerate(labels):
            z = (est[:, i].mean() - truth[i]) / (est[:, i].std(ddof=1) / np.sqrt(len(est)))
            check(f"3a {method.upper()} {label} bias within 3 MC SEs", abs(z) < 3.0, f"z={z:.2f}")
            coverage = cov[:, i].mean()
            check(
                f"3a {method.upper()} {label} coverage in [93%, 97%]",
                0.93 <= coverage <= 0.97,
                f"coverage={coverage:.3f}",
            )
    inb_coverage = np.mean(inb_cover)
    check(
        "3a MI pooled INB interval coverage in [93%, 97%]",
        0.93 <= inb_coverage <= 0.97,
        f"coverage={inb_coverage:.3f}",
    )


def test_3b_pmm_donor_property(mar_mc):
    _, _, _, violations, cells, _, _ = mar_mc
    check(
        "3b PMM donor property holds for 100% of imputed cells",
        violations == 0 and cells > 0,
        f"{violations} violations across {cells} imputed cells",
    )


# ---------------------------------------------------------------------------
# 4. Bayesian estimator validity
# ---------------------------------------------------------------------------


def test_4_bayes_bias_coverage_convergence():
    from trialcea.exceptions import ConvergenceError

    reps = 200
    base = reference_dgp(n=2000)
    truth = np.array([1000.0, 0.1])
    cfg = BayesIvConfig(chains=2, iterations=2500, burnin=1250, covariates=("eq5d0",))
    states = [s.generate_state(2) for s in np.random.SeedSequence(20_242).spawn(reps)]
    medians, covers, rhats = [], [], []
    failures = 0
    start = time.time()
    for rep in range(reps):
        ds, _ = generate_trial(replace(base, seed=int(states[rep][0])))
        try:
            draws = fit_bayes_iv(ds, replace(cfg, seed=int(states[rep][1])))
        except ConvergenceError:
            # the convergence gate rejected this run; count, never impute
            failures += 1
            continue
        cost, qaly = draws.effect_draws()
        medians.append([np.median(cost), np.median(qaly)])
        ci_c = np.quantile(cost, [0.025, 0.975])
        ci_q = np.quantile(qaly, [0.025, 0.975])
        covers.append([ci_c[0] <= truth[0] <= ci_c[1], ci_q[0] <= truth[1] <= ci_q[1]])
        rhats.append(draws.max_rhat())
    elapsed = time.time() - start
    retained = len(rhats)
    print(
        f"\n[criterion 4] Bayesian runs, {reps} replicates in {elapsed:.1f}s "
        f"({retained} retained, {failures} rejected by the convergence gate)"
    )
    check("4 runtime target", elapsed < 900.0, f"{elapsed:.1f}s < 900s")
    check("4 convergence-gate rejections below 10%", failures <= 0.10 * reps, f"{failures}/{reps}")
    med = np.array(medians)
    cov = np.array(covers)
    for i, label in enumerate(("cost", "qaly")):
        z = (med[:, i].mean() - truth[i]) / (med[:, i].std(ddof=1) / np.sqrt(retained))
        check(f"4 posterior-median {label} bias within 3 MC SEs", abs(z) < 3.0, f"z={z:.2f}")
        coverage = cov[:, i].mean()
        check(
            f"4 credible-interval {label} coverage in [90%, 98%]",
            0.90 <= coverage <= 0.98,
            f"coverage={coverage:.3f}",
        )
    worst = max(rhats)
    check("4 all retained runs have split-Rhat < 1.05", worst < 1.05, f"max Rhat {worst:.4f} over {retained} runs")


# ---------------------------------------------------------------------------
# 5. Pattern-mixture offset semantics
# ---------------------------------------------------------------------------


def test_5_pattern_mixture_offsets():
    cfg = reference_mar_dgp(n=2000, seed=20_243)
    ds, _ = generate_trial(cfg)
    dsm = apply_missingness(ds, cfg)
    imp = mi_impute(dsm, m=20, k=5, cycles=3, seed=7)

    shifted_zero = pattern_mixture_offset(imp, {"y1": {0: 0.0, 1: 0.0}})
    identical = all(
        np.array_equal(a.y1, b.y1) and np.array_equal(a.y2, b.y2)
        for a, b in zip(imp.datasets, shifted_zero.datasets)
    )
    check("5 zero offsets reproduce the MI result bit-identically", identical, "all cells equal")

    delta = 250.0
    shifted = pattern_mixture_offset(imp, {"y1": {1: delta}})
    base = pool_cace([itt_sur(d, covariates=[]) for d in imp.datasets])
    moved = pool_cace([itt_sur(d, covariates=[]) for d in shifted.datasets])
    arm1 = dsm.z == 1
    frac = (imp.imputed["y1"] & arm1).sum() / arm1.sum()
    observed = moved.theta[0] - base.theta[0]
    err = abs(observed - delta * frac)
    check(
        "5 offset shifts the pooled increment by delta x imputed fraction",
        err < 1e-10,
        f"|{observed:.10f} - {delta * frac:.10f}| = {err:.2e}",
    )

    # brute-force audit: shifting the cells by hand and re-running the full
    # pipeline gives the same pooled numbers
    manual = []
    for d in imp.datasets:
        y1 = d.y1.copy()
        y1[imp.imputed["y1"] & arm1] += delta
        manual.append(itt_sur(d.with_values(y1=y1), covariates=[]))
    manual_pooled = pool_cace(manual)
    err2 = np.max(np.abs(manual_pooled.theta - moved.theta))
    check("5 offset engine matches direct recomputation", err2 < 1e-10, f"max diff {err2:.2e}")


# ---------------------------------------------------------------------------
# 6. CLI determinism
# ---------------------------------------------------------------------------


def test_6_cli_pipelines_byte_identical(tmp_path):
    data = tmp_path / "trial.csv"
    rc = cli_main(
        ["simulate", "--preset", "reference-mar", "--n", "500", "--seed", "99", "--out", str(data)]
    )
    assert rc == 0
    pipelines = {
        "simulate": lambda out: [
            "simulate", "--preset", "reference-mar", "--n", "300", "--seed", "5",
            "--out", str(tmp_path / f"sim_{out.name}.csv"), "--truth", str(out),
        ],
        "estimate-mi": lambda out: [
            "estimate", "--data", str(data), "--estimand", "cace-3sls", "--missing", "mi",
            "--m", "5", "--cycles", "2", "--seed", "3", "--out", str(out),
        ],
        "estimate-ipw": lambda out: [
            "estimate", "--data", str(data), "--estimand", "cace-3sls", "--missing", "ipw",
            "--pom-order", "r0,r2,r1", "--out", str(out),
        ],
        "estimate-bayes": lambda out: [
            "estimate", "--data", str(data), "--estimand", "bayes", "--missing", "bayes",
            "--chains", "2", "--iters", "2000", "--burnin", "1000", "--seed", "4", "--out", str(out),
        ],
        "sensitivity": lambda out: [
            "sensitivity", "--data", str(data), "--estimand", "itt", "--m", "4", "--cycles", "2",
            "--seed", "6", "--delta", "y1:1:0:500:250", "--out", str(out),
        ],
        "cea": lambda out: [
            "cea", "--data", str(data), "--estimand", "cace-3sls", "--grid", "0:30000:10000",
            "--out", str(out),
        ],
        "mc": lambda out: [
            "mc", "--preset", "reference", "--n", "300", "--methods", "itt,cace-3sls",
            "--missing", "cca", "--reps", "5", "--seed", "8", "--out", str(out),
        ],
    }
    for name, build in pipelines.items():
        out_a = tmp_path / f"{name}_a.json"
        out_b = tmp_path / f"{name}_b.json"
        assert cli_main(build(out_a)) == 0, name
        assert cli_main(build(out_b)) == 0, name
        same = out_a.read_bytes() == out_b.read_bytes()
        check(f"6 {name} rerun is byte-identical", same, f"{out_a.stat().st_size} bytes")


# ---------------------------------------------------------------------------
# 7. Harness self-calibration
# ---------------------------------------------------------------------------


def test_7_harness_calibration():
    cell = toy_normal_mean_mc(replicates=1000, seed=20_244)
    half_width = 2.575829303548901 * np.sqrt(0.95 * 0.05 / 1000)
    low, high = 0.95 - half_width, 0.95 + half_width
    check(
        "7 toy-problem coverage in the 99% binomial band around 0.95",
        low <= cell["coverage"] <= high,
        f"coverage={cell['coverage']:.3f}, band=({low:.3f}, {high:.3f})",
    )

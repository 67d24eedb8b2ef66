"""Monte Carlo evaluation harness.

Runs any estimator x missing-data-method combination over replicated draws
from a data-generating process and reports bias, Monte Carlo standard
error, empirical and mean reported standard errors, interval coverage and
width against the generating truth.  Replicates use independent seeded
substreams, so results are identical regardless of scheduling order or
worker count; failed replicates are caught, counted and excluded, never
imputed.  The per-replicate log is always kept alongside the summary so
every aggregate can be recomputed independently.
"""

from __future__ import annotations

import concurrent.futures
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import stats

from .bayes import BayesIvConfig, fit_bayes_iv
from .cea import Z975
from .exceptions import TrialCeaError, ValidationError
from .iv import itt_sur, pp_sur, three_sls, tsls
from .missing import default_pom_spec, fit_pom, ipw_weights, mi_impute, pool_cace
from .simulate import DgpConfig, apply_missingness, generate_trial, population_truth

ESTIMATORS = ("itt", "pp", "cace-2sls", "cace-3sls", "bayes")
MISSING_METHODS = ("cca", "ipw", "mi", "bayes")
PARAMETERS = ("cost", "qaly", "inb")


@dataclass
class McOptions:
    """Knobs shared by every pipeline in one harness run."""

    covariates: tuple[str, ...] = ("eq5d0",)
    lam: float = 20_000.0
    mi_m: int = 50
    mi_k: int = 5
    mi_cycles: int = 5
    bayes: BayesIvConfig | None = None


def validate_methods(methods):
    out = []
    for estimator, missing in methods:
        if estimator not in ESTIMATORS:
            raise ValidationError(f"unknown estimator {estimator!r}")
        if missing not in MISSING_METHODS:
            raise ValidationError(f"unknown missing-data method {missing!r}")
        if estimator == "bayes" and missing in ("ipw", "mi"):
            raise ValidationError(
                "the Bayesian estimator handles missing data through its own model; "
                "combine it with 'cca' or 'bayes'"
            )
        if estimator != "bayes" and missing == "bayes":
            raise ValidationError("missing-data method 'bayes' requires the Bayesian estimator")
        out.append((estimator, missing))
    return out


def _interval(theta, se, crit):
    return theta - crit * se, theta + crit * se


def _point_results(est, lam, crit=Z975, dfs=None):
    """Rows for (cost, qaly, inb) from an estimate with theta/cov."""
    theta = np.asarray(est.theta, dtype=float)
    cov = np.asarray(est.cov, dtype=float)
    se = np.sqrt(np.diag(cov))
    inb_point = lam * theta[1] - theta[0]
    inb_var = lam**2 * cov[1, 1] + cov[0, 0] - 2 * lam * cov[0, 1]
    inb_se = float(np.sqrt(max(inb_var, 0.0)))
    crits = [crit, crit, crit]
    if dfs is not None:
        crits = [float(stats.t.ppf(0.975, df)) if np.isfinite(df) else Z975 for df in dfs]
    rows = {}
    for i, name in enumerate(("cost", "qaly")):
        lo, hi = _interval(theta[i], se[i], crits[i])
        rows[name] = (float(theta[i]), float(se[i]), float(lo), float(hi))
    lo, hi = _interval(inb_point, inb_se, crits[2])
    rows["inb"] = (float(inb_point), inb_se, float(lo), float(hi))
    return rows


def _mi_inb_df(inbs, inb_vars, m):
    qbar = float(np.mean(inbs))
    w = float(np.mean(inb_vars))
    b = float(np.var(inbs, ddof=1))
    t = w + (1 + 1 / m) * b
    if b <= 0:
        return qbar, np.sqrt(t), np.inf
    df = (m - 1) * (1 + w / ((1 + 1 / m) * b)) ** 2
    return qbar, np.sqrt(t), df


def _frequentist(ds, estimator, opts, weights=None):
    covs = list(opts.covariates)
    if estimator == "itt":
        return itt_sur(ds, covariates=covs, weights=weights)
    if estimator == "pp":
        return pp_sur(ds, covariates=covs, weights=weights)
    if estimator == "cace-3sls":
        return three_sls(ds, covariates=covs, weights=weights)
    raise ValidationError(f"not a system estimator: {estimator!r}")


def _run_pipeline(ds, dgp, estimator, missing, opts, mi_seed, bayes_seed):
    lam = opts.lam
    if estimator == "bayes":
        base = opts.bayes or BayesIvConfig()
        cfg = replace(base, seed=bayes_seed, covariates=tuple(opts.covariates))
        if missing == "cca":
            mask = ds.complete_mask(["y1", "y2", *opts.covariates])
            draws = fit_bayes_iv(ds.subset(mask), cfg)
        else:  # full Bayesian handling of incomplete rows
            draws = fit_bayes_iv(ds, cfg)
        cost, qaly = draws.effect_draws()
        inb_draws = lam * qaly - cost
        rows = {}
        for name, sample in (("cost", cost), ("qaly", qaly), ("inb", inb_draws)):
            lo, hi = np.quantile(sample, [0.025, 0.975])
            rows[name] = (
                float(np.median(sample)),
                float(sample.std(ddof=1)),
                float(lo),
                float(hi),
            )
        return rows

    if estimator == "cace-2sls":
        if missing == "mi":
            imp = mi_impute(ds, m=opts.mi_m, k=opts.mi_k, cycles=opts.mi_cycles, seed=mi_seed)
            per = {"cost": [], "qaly": []}
            for d in imp.datasets:
                for name, outcome in (("cost", "y1"), ("qaly", "y2")):
                    fit = tsls(d, outcome, covariates=list(opts.covariates))
                    per[name].append((fit.params[1], fit.cov[1, 1]))
            rows = {}
            for name in ("cost", "qaly"):
                ests = [p[0] for p in per[name]]
                variances = [p[1] for p in per[name]]
                point, se, df = _mi_inb_df(ests, variances, imp.m)
                crit = float(stats.t.ppf(0.975, df)) if np.isfinite(df) else Z975
                rows[name] = (point, float(se), point - crit * se, point + crit * se)
            return rows
        weights = _ipw_weights_for(ds, dgp) if missing == "ipw" else None
        rows = {}
        for name, outcome in (("cost", "y1"), ("qaly", "y2")):
            fit = tsls(ds, outcome, covariates=list(opts.covariates), weights=weights)
            theta, se = float(fit.params[1]), float(np.sqrt(fit.cov[1, 1]))
            rows[name] = (theta, se, theta - Z975 * se, theta + Z975 * se)
        return rows  # no joint covariance across outcomes, so no INB row

    if missing == "mi":
        imp = mi_impute(ds, m=opts.mi_m, k=opts.mi_k, cycles=opts.mi_cycles, seed=mi_seed)
        fits = [_frequentist(d, estimator, opts) for d in imp.datasets]
        pooled = pool_cace(fits)
        inbs = [lam * f.theta[1] - f.theta[0] for f in fits]
        inb_vars = [
            lam**2 * f.cov[1, 1] + f.cov[0, 0] - 2 * lam * f.cov[0, 1] for f in fits
        ]
        inb_point, inb_se, inb_df = _mi_inb_df(inbs, inb_vars, imp.m)
        rows = _point_results(pooled, lam, dfs=[pooled.df[0], pooled.df[1], inb_df])
        crit = float(stats.t.ppf(0.975, inb_df)) if np.isfinite(inb_df) else Z975
        rows["inb"] = (
            float(inb_point),
            float(inb_se),
            float(inb_point - crit * inb_se),
            float(inb_point + crit * inb_se),
        )
        return rows

    weights = _ipw_weights_for(ds, dgp) if missing == "ipw" else None
    est = _frequentist(ds, estimator, opts, weights=weights)
    return _point_results(est, lam)


def _ipw_weights_for(ds, dgp):
    order = dgp.missing.order if dgp.missing is not None else ("r0", "r1", "r2")
    spec = default_pom_spec(ds, order=order)
    pom = fit_pom(ds, spec)
    return ipw_weights(ds, pom)


def _truth_for(truth, estimator, lam):
    effects = truth["itt"] if estimator == "itt" else truth["cace"]
    return {
        "cost": float(effects[0]),
        "qaly": float(effects[1]),
        "inb": float(lam * effects[1] - effects[0]),
    }


def _replicate_seeds(seed, replicates):
    return [s.generate_state(3) for s in np.random.SeedSequence(seed).spawn(replicates)]


def _run_replicate(args):
    dgp, methods, opts, rep_index, state = args
    dgp_seed, mi_seed, bayes_seed = (int(v) for v in state)
    cfg = replace(dgp, seed=dgp_seed)
    ds, truth = generate_trial(cfg)
    ds = apply_missingness(ds, cfg)
    records = []
    for estimator, missing in methods:
        try:
            rows = _run_pipeline(ds, cfg, estimator, missing, opts, mi_seed, bayes_seed)
            for parameter, (est, se, lo, hi) in rows.items():
                records.append(
                    {
                        "replicate": rep_index,
                        "estimator": estimator,
                        "missing": missing,
                        "parameter": parameter,
                        "estimate": est,
                        "se": se,
                        "ci_low": lo,
                        "ci_high": hi,
                        "ok": True,
                        "error": "",
                    }
                )
        except (TrialCeaError, np.linalg.LinAlgError) as exc:
            records.append(
                {
                    "replicate": rep_index,
                    "estimator": estimator,
                    "missing": missing,
                    "parameter": "",
                    "estimate": float("nan"),
                    "se": float("nan"),
                    "ci_low": float("nan"),
                    "ci_high": float("nan"),
                    "ok": False,
                    "error": f"{type(exc).__name__}: {exc}",
                }
            )
    return rep_index, records


@dataclass
class McReport:
    cells: list[dict]
    replicate_log: list[dict]
    config: dict
    replicates: int
    seed: int

    def cell(self, estimator, missing, parameter) -> dict:
        for c in self.cells:
            if (c["estimator"], c["missing"], c["parameter"]) == (estimator, missing, parameter):
                return c
        raise KeyError((estimator, missing, parameter))


def aggregate_records(records, truths, replicates) -> list[dict]:
    """Summarise the per-replicate log into per-cell rows (pure function of
    the log, so summaries can be audited by recomputation)."""
    groups = {}
    failures = {}
    for rec in records:
        key = (rec["estimator"], rec["missing"])
        if not rec["ok"]:
            failures[key] = failures.get(key, 0) + 1
            continue
        groups.setdefault((*key, rec["parameter"]), []).append(rec)
    cells = []
    for (estimator, missing, parameter), rows in sorted(groups.items()):
        est = np.array([r["estimate"] for r in rows])
        se = np.array([r["se"] for r in rows])
        lo = np.array([r["ci_low"] for r in rows])
        hi = np.array([r["ci_high"] for r in rows])
        truth = truths[estimator][parameter]
        nrep = est.size
        empirical_sd = float(est.std(ddof=1)) if nrep > 1 else float("nan")
        bias = float(est.mean() - truth)
        nfail = failures.get((estimator, missing), 0)
        cells.append(
            {
                "estimator": estimator,
                "missing": missing,
                "parameter": parameter,
                "truth": float(truth),
                "n_reps": int(nrep),
                "n_failures": int(nfail),
                "mean_estimate": float(est.mean()),
                "bias": bias,
                "mc_se_bias": empirical_sd / float(np.sqrt(nrep)) if nrep > 1 else float("nan"),
                "empirical_sd": empirical_sd,
                "mean_se": float(se.mean()),
                "coverage": float(((lo <= truth) & (truth <= hi)).mean()),
                "mean_ci_width": float((hi - lo).mean()),
                "degraded": bool(nfail > 0.10 * replicates),
            }
        )
    return cells


def run_mc(
    dgp: DgpConfig,
    methods,
    replicates: int,
    seed: int = 0,
    options: McOptions | None = None,
    workers: int = 1,
) -> McReport:
    """Evaluate estimator/missing-method pipelines over seeded replicates.

    Each replicate draws a fresh trial from `dgp` (with its missingness
    stage applied), runs every requested pipeline and records estimates and
    intervals; summaries compare against the generating truth.  Replicate
    substreams derive from (seed, replicate index), so reruns are
    bit-identical for any worker count.
    """
    if replicates < 2:
        raise ValidationError("at least two replicates are required")
    methods = validate_methods(methods)
    opts = options or McOptions()
    states = _replicate_seeds(seed, replicates)
    jobs = [(dgp, methods, opts, r, states[r]) for r in range(replicates)]
    results = {}
    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            for rep_index, records in pool.map(_run_replicate, jobs, chunksize=8):
                results[rep_index] = records
    else:
        for job in jobs:
            rep_index, records = _run_replicate(job)
            results[rep_index] = records
    log = [rec for r in range(replicates) for rec in results[r]]
    truth = population_truth(dgp)
    truths = {est: _truth_for(truth, est, opts.lam) for est, _ in methods}
    cells = aggregate_records(log, truths, replicates)
    config = {
        "dgp": _jsonable(asdict(dgp)),
        "methods": [list(m) for m in methods],
        "options": {
            "covariates": list(opts.covariates),
            "lambda": opts.lam,
            "mi_m": opts.mi_m,
            "mi_k": opts.mi_k,
            "mi_cycles": opts.mi_cycles,
            "bayes": _jsonable(asdict(opts.bayes)) if opts.bayes else None,
        },
    }
    return McReport(cells=cells, replicate_log=log, config=config, replicates=replicates, seed=seed)


def toy_normal_mean_mc(replicates: int = 1000, seed: int = 0, n_per_rep: int = 50) -> dict:
    """Self-calibration of the harness arithmetic on a known-normal toy.

    Each replicate estimates the mean of `n_per_rep` standard normal draws
    with its textbook t interval; the resulting cell must show ~95%
    coverage of zero.
    """
    states = _replicate_seeds(seed, replicates)
    crit = float(stats.t.ppf(0.975, n_per_rep - 1))
    records = []
    for r in range(replicates):
        rng = np.random.default_rng(int(states[r][0]))
        x = rng.standard_normal(n_per_rep)
        m = float(x.mean())
        se = float(x.std(ddof=1) / np.sqrt(n_per_rep))
        records.append(
            {
                "replicate": r,
                "estimator": "toy-mean",
                "missing": "none",
                "parameter": "mean",
                "estimate": m,
                "se": se,
                "ci_low": m - crit * se,
                "ci_high": m + crit * se,
                "ok": True,
                "error": "",
            }
        )
    cells = aggregate_records(records, {"toy-mean": {"mean": 0.0}}, replicates)
    return cells[0]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def report_to_dict(report: McReport) -> dict:
    return {
        "replicates": report.replicates,
        "seed": report.seed,
        "config": _jsonable(report.config),
        "cells": _jsonable(report.cells),
        "replicate_log": _jsonable(report.replicate_log),
    }


def report_json(report: McReport, path) -> None:
    """Write the report with stable field order; reruns are byte-identical."""
    payload = report_to_dict(report)
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, indent=2)
        handle.write("\n")


def evaluate_checks(report: McReport, checks) -> list[dict]:
    """Evaluate declarative bounds against summary cells.

    Each check names a cell (estimator, missing, parameter) and a metric
    (any summary field, or 'abs_bias_over_mcse') with optional min/max
    bounds; returns the list of failed checks with observed values.
    """
    failures = []
    for check in checks:
        try:
            cell = report.cell(check["estimator"], check["missing"], check["parameter"])
        except KeyError:
            failures.append({**check, "observed": None, "reason": "cell not found"})
            continue
        metric = check["metric"]
        if metric == "abs_bias_over_mcse":
            observed = abs(cell["bias"]) / cell["mc_se_bias"] if cell["mc_se_bias"] else float("inf")
        elif metric in cell:
            observed = cell[metric]
        else:
            failures.append({**check, "observed": None, "reason": f"unknown metric {metric!r}"})
            continue
        lo = check.get("min")
        hi = check.get("max")
        if (lo is not None and observed < lo) or (hi is not None and observed > hi):
            failures.append({**check, "observed": observed, "reason": "out of bounds"})
    return failures

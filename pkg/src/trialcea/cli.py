"""Command-line interface.

Subcommands: ``simulate`` (draw a trial from a DGP config), ``estimate``
(one estimator x missing-method pipeline on a CSV), ``impute`` (write
multiply imputed datasets), ``sensitivity`` (pattern-mixture offset sweep),
``cea`` (net-benefit summaries and acceptability curve) and ``mc`` (the
Monte Carlo harness).  All outputs are JSON with stable field order, so a
rerun with the same seed and config is byte-identical.
"""

from __future__ import annotations

import argparse
import itertools
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import cea as cea_mod
from .bayes import BayesIvConfig, fit_bayes_iv, summarize_posterior
from .data import load_csv, parse_schema, summarize_patterns, write_csv
from .exceptions import TrialCeaError, ValidationError
from .iv import itt_sur, pp_sur, three_sls, tsls
from .mc import McOptions, evaluate_checks, report_json, run_mc
from .missing import (
    default_pom_spec,
    fit_pom,
    ipw_weights,
    mi_impute,
    pattern_mixture_offset,
    pool_cace,
    rubin_pool,
)
from .simulate import DgpConfig, MissingnessConfig, apply_missingness, generate_trial
from .simulate import reference_dgp, reference_mar_dgp

PRESETS = {"reference": reference_dgp, "reference-mar": reference_mar_dgp}


class _PointEstimate:
    def __init__(self, theta, cov):
        self.theta = theta
        self.cov = cov


def _write_json(payload, path):
    text = json.dumps(payload, indent=2) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def dgp_from_dict(raw: dict) -> DgpConfig:
    data = dict(raw)
    missing = data.pop("missing", None)
    if missing:
        models = {k: dict(v) for k, v in missing.get("models", {}).items()}
        data["missing"] = MissingnessConfig(
            mechanism=missing["mechanism"],
            models=models,
            order=tuple(missing.get("order", ("r0", "r1", "r2"))),
        )
    if "extra_covariates" in data:
        data["extra_covariates"] = {
            k: tuple(v) for k, v in data["extra_covariates"].items()
        }
    return DgpConfig(**data)


def _load_dgp(args) -> DgpConfig:
    if args.config:
        raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        raw.pop("checks", None)
        cfg = dgp_from_dict(raw)
    else:
        cfg = PRESETS[args.preset]()
    overrides = {}
    if getattr(args, "n", None):
        overrides["n"] = args.n
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return replace(cfg, **overrides) if overrides else cfg


def _load_dataset(args):
    schema = parse_schema(args.schema) if args.schema else None
    return load_csv(args.data, schema=schema)


def _covariates(args, ds):
    if args.covariates is None:
        return ["eq5d0"] if "eq5d0" in ds.covariates else []
    text = args.covariates.strip()
    if not text:
        return []
    names = [c.strip() for c in text.split(",") if c.strip()]
    return names


def _effects_block(theta, cov, crit=1.959963984540054):
    se = np.sqrt(np.diag(cov))
    out = {}
    for i, name in enumerate(("cost", "qaly")):
        out[name] = {
            "estimate": float(theta[i]),
            "se": float(se[i]),
            "ci": [float(theta[i] - crit * se[i]), float(theta[i] + crit * se[i])],
        }
    return out


def _fit_bayes(ds, missing, covariates, args):
    if missing not in ("cca", "bayes"):
        raise ValidationError("the Bayesian model handles missing data itself; use --missing cca or bayes")
    cfg = BayesIvConfig(
        chains=args.chains,
        iterations=args.iters,
        burnin=args.burnin,
        thin=args.thin,
        seed=args.seed,
        covariates=tuple(covariates),
    )
    data = ds
    if missing == "cca":
        data = ds.subset(ds.complete_mask(["y1", "y2", *covariates]))
    return cfg, data, fit_bayes_iv(data, cfg)


def run_estimate(ds, estimand, missing, covariates, lam, args, bayes_draws=None) -> dict:
    """One analysis pipeline on a loaded dataset; returns the JSON payload."""
    robust = not getattr(args, "classical", False)
    report = {
        "estimand": estimand,
        "missing": missing,
        "covariates": list(covariates),
        "lambda": lam,
        "n_total": ds.n,
    }

    if estimand == "bayes":
        cfg, data, draws = bayes_draws if bayes_draws else _fit_bayes(ds, missing, covariates, args)
        summary = summarize_posterior(draws, lam)
        cost, qaly = draws.effect_draws()
        report["n_used"] = data.n
        report["effects"] = {
            "cost": {
                "estimate": summary.inc_cost,
                "se": float(cost.std(ddof=1)),
                "ci": list(summary.extras["cost_ci"]),
            },
            "qaly": {
                "estimate": summary.inc_qaly,
                "se": float(qaly.std(ddof=1)),
                "ci": list(summary.extras["qaly_ci"]),
            },
        }
        report["inb"] = {
            "lambda": lam,
            "estimate": summary.inb,
            "se": summary.inb_se,
            "ci": list(summary.ci),
        }
        report["diagnostics"] = {
            "rhat": {k: float(v) for k, v in draws.rhat.items()},
            "ess": {k: float(v) for k, v in draws.ess.items()},
            "acceptance": {k: float(v) for k, v in draws.acceptance.items()},
            "chains": draws.chains,
            "draws": int(draws.beta.shape[0]),
            "prior_sd": cfg.prior_sd,
            "wishart_df": cfg.wishart_df,
            "wishart_scale": "identity",
        }
        return report

    weights = None
    diagnostics = {}
    if missing == "ipw":
        order = tuple(args.pom_order.split(",")) if args.pom_order else ("r0", "r1", "r2")
        pom = fit_pom(ds, default_pom_spec(ds, order=order))
        wv = ipw_weights(ds, pom)
        weights = wv
        diagnostics["ipw"] = {
            **wv.diagnostics,
            "pom": {
                m.indicator: {"kept": m.kept, "constant_probability": m.constant_probability}
                for m in pom.models
            },
        }
    elif missing == "mi":
        imp = mi_impute(ds, m=args.m, k=args.k, cycles=args.cycles, seed=args.seed)
        diagnostics["mi"] = {"m": imp.m, "k": imp.k, "cycles": imp.cycles, "seed": imp.seed}
        if estimand == "cace-2sls":
            raise ValidationError("cace-2sls with MI lacks a joint covariance; use cace-3sls")
        estimator = {"itt": itt_sur, "pp": pp_sur, "cace-3sls": three_sls}[estimand]
        fits = [estimator(d, covariates=covariates, robust=robust) for d in imp.datasets]
        pooled = pool_cace(fits)
        inbs = [lam * f.theta[1] - f.theta[0] for f in fits]
        inb_vars = [lam**2 * f.cov[1, 1] + f.cov[0, 0] - 2 * lam * f.cov[0, 1] for f in fits]
        pooled_inb = rubin_pool([[v] for v in inbs], [[[v]] for v in inb_vars])
        ci = pooled.conf_int()
        inb_ci = pooled_inb.conf_int()
        report["n_used"] = ds.n
        report["effects"] = {
            "cost": {"estimate": float(pooled.theta[0]), "se": float(pooled.se()[0]), "ci": list(map(float, ci[0]))},
            "qaly": {"estimate": float(pooled.theta[1]), "se": float(pooled.se()[1]), "ci": list(map(float, ci[1]))},
        }
        report["covariance"] = [[float(v) for v in row] for row in pooled.total]
        report["inb"] = {
            "lambda": lam,
            "estimate": float(pooled_inb.estimate[0]),
            "se": float(pooled_inb.se()[0]),
            "ci": list(map(float, inb_ci[0])),
        }
        report["diagnostics"] = {**diagnostics, "df": [float(v) for v in pooled.df]}
        if fits and fits[0].first_stage_f is not None:
            report["first_stage"] = {
                "coef": float(np.mean([f.first_stage_coef for f in fits])),
                "f": float(np.mean([f.first_stage_f for f in fits])),
            }
        return report

    if estimand == "cace-2sls":
        effects = {}
        first = None
        for name, outcome in (("cost", "y1"), ("qaly", "y2")):
            fit = tsls(ds, outcome, covariates=covariates, weights=weights, robust=robust)
            se = float(np.sqrt(fit.cov[1, 1]))
            effects[name] = {
                "estimate": float(fit.params[1]),
                "se": se,
                "ci": [float(fit.params[1] - 1.959963984540054 * se), float(fit.params[1] + 1.959963984540054 * se)],
            }
            first = {"coef": float(fit.diagnostics["first_stage_coef"]), "f": float(fit.diagnostics["first_stage_f"])}
            report.setdefault("n_used", fit.nobs)
        report["effects"] = effects
        report["first_stage"] = first
        report["diagnostics"] = diagnostics
        report["note"] = "per-outcome 2sls has no cross-outcome covariance; no INB reported"
        return report

    estimator = {"itt": itt_sur, "pp": pp_sur, "cace-3sls": three_sls}[estimand]
    est = estimator(ds, covariates=covariates, weights=weights, robust=robust)
    result = cea_mod.inb(est, lam, missing_method=missing)
    report["n_used"] = est.nobs
    report["effects"] = _effects_block(est.theta, est.cov)
    report["covariance"] = [[float(v) for v in row] for row in est.cov]
    report["inb"] = {"lambda": lam, "estimate": result.inb, "se": result.inb_se, "ci": list(result.ci)}
    if est.first_stage_f is not None:
        report["first_stage"] = {"coef": float(est.first_stage_coef), "f": float(est.first_stage_f)}
    report["diagnostics"] = diagnostics
    return report


def _cmd_simulate(args):
    cfg = _load_dgp(args)
    ds, truth = generate_trial(cfg)
    ds = apply_missingness(ds, cfg)
    write_csv(ds, args.out)
    if args.truth:
        summary = summarize_patterns(ds)
        payload = {
            "cace": {"cost": truth.cace[0], "qaly": truth.cace[1]},
            "itt": {"cost": truth.itt[0], "qaly": truth.itt[1]},
            "compliance_diff": truth.compliance_diff,
            "strata_counts": {
                "never_taker": int((truth.stratum == 0).sum()),
                "complier": int((truth.stratum == 1).sum()),
                "always_taker": int((truth.stratum == 2).sum()),
            },
            "missing_patterns": {
                "counts": {"".join(map(str, k)): v for k, v in sorted(summary.counts.items())},
                "monotone": summary.monotone,
            },
            "seed": cfg.seed,
            "n": cfg.n,
        }
        _write_json(payload, args.truth)
    return 0


def _cmd_estimate(args):
    ds = _load_dataset(args)
    covariates = _covariates(args, ds)
    report = run_estimate(ds, args.estimand, args.missing, covariates, args.wtp, args)
    _write_json(report, args.out)
    return 0


def _cmd_impute(args):
    ds = _load_dataset(args)
    imp = mi_impute(ds, m=args.m, k=args.k, cycles=args.cycles, seed=args.seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = []
    for i, d in enumerate(imp.datasets):
        name = f"imputation_{i + 1:03d}.csv"
        write_csv(d, out_dir / name)
        files.append(name)
    manifest = {
        "m": imp.m,
        "k": imp.k,
        "cycles": imp.cycles,
        "seed": imp.seed,
        "files": files,
        "imputed_cells": {v: int(mask.sum()) for v, mask in sorted(imp.imputed.items())},
    }
    _write_json(manifest, out_dir / "manifest.json")
    return 0


def _parse_delta_specs(specs):
    """VAR:ARM:VALUE or VAR:ARM:START:STOP:STEP -> list of (var, arm, grid)."""
    out = []
    for spec in specs or []:
        parts = spec.split(":")
        if len(parts) == 3:
            var, arm, value = parts
            grid = [float(value)]
        elif len(parts) == 5:
            var, arm, start, stop, step = parts
            start, stop, step = float(start), float(stop), float(step)
            count = int(round((stop - start) / step)) + 1 if step != 0 else 1
            grid = [start + i * step for i in range(max(count, 1))]
        else:
            raise ValidationError(f"bad --delta spec {spec!r}; use var:arm:value or var:arm:start:stop:step")
        out.append((var, int(arm), grid))
    return out


def _cmd_sensitivity(args):
    ds = _load_dataset(args)
    covariates = _covariates(args, ds)
    imp = mi_impute(ds, m=args.m, k=args.k, cycles=args.cycles, seed=args.seed)
    specs = _parse_delta_specs(args.delta)
    if not specs:
        raise ValidationError("at least one --delta specification is required")
    estimator = {"itt": itt_sur, "pp": pp_sur, "cace-3sls": three_sls}[args.estimand]
    grids = [grid for _, _, grid in specs]
    rows = []
    for combo in itertools.product(*grids):
        deltas = {}
        for (var, arm, _), value in zip(specs, combo):
            deltas.setdefault(var, {})[arm] = value
        shifted = pattern_mixture_offset(imp, deltas)
        fits = [estimator(d, covariates=covariates) for d in shifted.datasets]
        pooled = pool_cace(fits)
        res = cea_mod.inb(pooled, args.wtp)
        rows.append(
            {
                "deltas": [
                    {"variable": var, "arm": arm, "delta": float(value)}
                    for (var, arm, _), value in zip(specs, combo)
                ],
                "inc_cost": float(pooled.theta[0]),
                "inc_qaly": float(pooled.theta[1]),
                "inb": res.inb,
                "inb_se": res.inb_se,
                "inb_ci": list(res.ci),
            }
        )
    payload = {
        "estimand": args.estimand,
        "lambda": args.wtp,
        "m": args.m,
        "k": args.k,
        "cycles": args.cycles,
        "seed": args.seed,
        "rows": rows,
    }
    _write_json(payload, args.out)
    return 0


def _parse_grid(text):
    parts = text.split(":")
    if len(parts) != 3:
        raise ValidationError(f"bad --grid {text!r}; use start:stop:step")
    start, stop, step = (float(p) for p in parts)
    return np.arange(start, stop + step / 2, step)


def _cmd_cea(args):
    ds = _load_dataset(args)
    covariates = _covariates(args, ds)
    grid = _parse_grid(args.grid)
    if args.estimand == "bayes":
        fitted = _fit_bayes(ds, args.missing, covariates, args)
        report = run_estimate(
            ds, args.estimand, args.missing, covariates, args.wtp, args, bayes_draws=fitted
        )
        curve = cea_mod.ceac(fitted[2], grid)
        theta = np.array([report["effects"]["cost"]["estimate"], report["effects"]["qaly"]["estimate"]])
        ratio = None if theta[1] == 0 else float(theta[0] / theta[1])
    else:
        report = run_estimate(ds, args.estimand, args.missing, covariates, args.wtp, args)
        if args.estimand == "cace-2sls":
            raise ValidationError("the acceptability curve needs a joint covariance; use cace-3sls, itt or pp")
        theta = np.array([report["effects"]["cost"]["estimate"], report["effects"]["qaly"]["estimate"]])
        est = _PointEstimate(theta, np.array(report["covariance"]))
        curve = cea_mod.ceac(est, grid)
        try:
            ratio = cea_mod.icer(est).value
        except TrialCeaError:
            ratio = None
    payload = {
        "estimate": report,
        "icer": ratio,
        "ceac": curve.as_rows(),
    }
    _write_json(payload, args.out)
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as handle:
            handle.write("lambda,p_cost_effective\n")
            for row in curve.as_rows():
                handle.write(f"{row['lambda']!r},{row['p_cost_effective']!r}\n")
    return 0


def _cmd_mc(args):
    cfg_checks = []
    if args.config:
        raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        cfg_checks = raw.get("checks", [])
    dgp = _load_dgp(args)
    estimators = [m.strip() for m in args.methods.split(",") if m.strip()]
    missing = [m.strip() for m in args.missing.split(",") if m.strip()]
    methods = []
    for est in estimators:
        for miss in missing:
            if est == "bayes" and miss in ("ipw", "mi"):
                continue
            if est != "bayes" and miss == "bayes":
                continue
            methods.append((est, miss))
    bayes_cfg = BayesIvConfig(
        chains=args.chains, iterations=args.iters, burnin=args.burnin, thin=args.thin
    )
    options = McOptions(
        covariates=tuple(_split_names(args.covariates, default=("eq5d0",))),
        lam=args.wtp,
        mi_m=args.m,
        mi_k=args.k,
        mi_cycles=args.cycles,
        bayes=bayes_cfg,
    )
    report = run_mc(
        dgp, methods, replicates=args.reps, seed=args.seed, options=options, workers=args.workers
    )
    report_json(report, args.out)
    if args.checks:
        cfg_checks = json.loads(Path(args.checks).read_text(encoding="utf-8"))
    if cfg_checks:
        failures = evaluate_checks(report, cfg_checks)
        if failures:
            sys.stderr.write(json.dumps({"failed_checks": failures}, indent=2) + "\n")
            return 1
    return 0


def _split_names(text, default=()):
    if text is None:
        return list(default)
    return [c.strip() for c in text.split(",") if c.strip()]


def _add_data_args(p):
    p.add_argument("--data", required=True, help="input CSV file")
    p.add_argument("--schema", help="logical=column mapping, e.g. z=arm,d=received,y1=cost")


def _add_mi_args(p):
    p.add_argument("--m", type=int, default=50, help="number of imputations")
    p.add_argument("--k", type=int, default=5, help="PMM donor count")
    p.add_argument("--cycles", type=int, default=10, help="chained-equation cycles")


def _add_bayes_args(p):
    p.add_argument("--chains", type=int, default=4)
    p.add_argument("--iters", type=int, default=10_000)
    p.add_argument("--burnin", type=int, default=5_000)
    p.add_argument("--thin", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trialcea",
        description="Compliance-adjusted cost-effectiveness analysis for randomised trials",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw a trial dataset from a DGP configuration")
    p.add_argument("--config", help="DGP JSON file")
    p.add_argument("--preset", choices=sorted(PRESETS), default="reference")
    p.add_argument("--n", type=int, help="override subject count")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output CSV")
    p.add_argument("--truth", help="output JSON with the generating truth")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("estimate", help="run one estimator on a dataset")
    _add_data_args(p)
    p.add_argument("--estimand", required=True, choices=["itt", "pp", "cace-2sls", "cace-3sls", "bayes"])
    p.add_argument("--missing", default="cca", choices=["cca", "ipw", "mi", "bayes"])
    p.add_argument("--covariates", help="comma-separated covariate names ('' for none)")
    p.add_argument("--lambda", dest="wtp", type=float, default=20_000.0, help="willingness to pay")
    p.add_argument("--classical", action="store_true", help="classical instead of robust covariance")
    p.add_argument("--pom-order", help="cascade order for IPW, e.g. r0,r2,r1")
    p.add_argument("--seed", type=int, default=0)
    _add_mi_args(p)
    _add_bayes_args(p)
    p.add_argument("--out", default="-", help="output JSON (default stdout)")
    p.set_defaults(func=_cmd_estimate)

    p = sub.add_parser("impute", help="write multiply imputed datasets")
    _add_data_args(p)
    _add_mi_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_impute)

    p = sub.add_parser("sensitivity", help="pattern-mixture offset sweep over MI")
    _add_data_args(p)
    p.add_argument("--estimand", default="cace-3sls", choices=["itt", "pp", "cace-3sls"])
    p.add_argument("--covariates")
    p.add_argument("--lambda", dest="wtp", type=float, default=20_000.0)
    p.add_argument(
        "--delta",
        action="append",
        help="var:arm:value or var:arm:start:stop:step (repeatable)",
    )
    p.add_argument("--seed", type=int, default=0)
    _add_mi_args(p)
    p.add_argument("--out", default="-")
    p.set_defaults(func=_cmd_sensitivity)

    p = sub.add_parser("cea", help="net benefit, ICER and acceptability curve")
    _add_data_args(p)
    p.add_argument("--estimand", default="cace-3sls", choices=["itt", "pp", "cace-3sls", "bayes"])
    p.add_argument("--missing", default="cca", choices=["cca", "ipw", "mi", "bayes"])
    p.add_argument("--covariates")
    p.add_argument("--lambda", dest="wtp", type=float, default=20_000.0)
    p.add_argument("--grid", default="0:50000:1000")
    p.add_argument("--classical", action="store_true")
    p.add_argument("--pom-order")
    p.add_argument("--seed", type=int, default=0)
    _add_mi_args(p)
    _add_bayes_args(p)
    p.add_argument("--out", default="-")
    p.add_argument("--csv", help="also write the acceptability curve as CSV")
    p.set_defaults(func=_cmd_cea)

    p = sub.add_parser("mc", help="Monte Carlo bias/coverage harness")
    p.add_argument("--dgp", "--config", dest="config", help="DGP JSON (may embed a 'checks' list)")
    p.add_argument("--preset", choices=sorted(PRESETS), default="reference")
    p.add_argument("--n", type=int)
    p.add_argument("--methods", default="cace-3sls", help="comma list of estimators")
    p.add_argument("--missing", default="cca", help="comma list of missing-data methods")
    p.add_argument("--reps", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--covariates")
    p.add_argument("--lambda", dest="wtp", type=float, default=20_000.0)
    _add_mi_args(p)
    _add_bayes_args(p)
    p.add_argument("--checks", help="JSON file with acceptance checks")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_mc)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TrialCeaError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Missing-data engines: inverse probability weighting, multiple imputation
by chained equations with predictive mean matching, Rubin pooling, and
pattern-mixture offset sensitivity analysis.

The weighting path fits one logistic probability-of-missingness model per
observation indicator along a monotone cascade and weights complete cases
by the inverse product of the fitted probabilities.  The imputation path
draws proper parameter values (normal approximation for coefficients,
scaled chi-square for the residual variance), matches each missing cell to
its nearest predicted-mean donors, and copies an observed value.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .data import BASELINE_UTILITY, TrialDataset
from .exceptions import ImputationError, PositivityError, ValidationError
from .linreg import FitResult, _qr_solve, logistic
from .simulate import INDICATOR_VARS


@dataclass(frozen=True)
class PomSpec:
    """Candidate regressors per observation indicator for POM fitting.

    `candidates` maps r0/r1/r2 to variable names; each model may only use
    variables observed no later than its own stage in `order`.  Backward
    stepwise selection keeps regressors with Wald p-values below
    `p_threshold`.
    """

    candidates: dict[str, list[str]]
    p_threshold: float = 0.1
    order: tuple[str, ...] = ("r0", "r1", "r2")

    def __post_init__(self):
        if sorted(self.order) != sorted(INDICATOR_VARS):
            raise ValidationError(f"order must be a permutation of {tuple(INDICATOR_VARS)}")
        for indicator, names in self.candidates.items():
            if indicator not in INDICATOR_VARS:
                raise ValidationError(f"unknown indicator {indicator!r}")
            position = self.order.index(indicator)
            later = {INDICATOR_VARS[ind] for ind in self.order[position:]}
            for name in names:
                if name in later:
                    raise ValidationError(
                        f"candidate {name!r} for {indicator} is not observed before that stage"
                    )


def default_pom_spec(ds: TrialDataset, order=("r0", "r1", "r2"), p_threshold: float = 0.1) -> PomSpec:
    """Candidates: assignment, receipt, fully observed covariates, and any
    cascade variable observed at an earlier stage."""
    fully_observed = [
        name for name, col in ds.covariates.items()
        if name != BASELINE_UTILITY and not np.isnan(col).any()
    ]
    candidates = {}
    for position, indicator in enumerate(order):
        names = ["z", "d"] + fully_observed
        names += [INDICATOR_VARS[earlier] for earlier in order[:position]]
        candidates[indicator] = names
    return PomSpec(candidates=candidates, p_threshold=p_threshold, order=order)


@dataclass
class PomModel:
    indicator: str
    target: str
    kept: list[str]
    fit: FitResult | None
    constant_probability: float | None
    at_risk: int
    dropped: list[tuple[str, float]] = field(default_factory=list)


@dataclass
class PomFits:
    models: list[PomModel]
    order: tuple[str, ...]
    spec: PomSpec

    def probabilities(self, ds: TrialDataset) -> np.ndarray:
        """Per-subject product of fitted observation probabilities.

        NaN where a required predictor is itself unobserved (such subjects
        cannot be complete cases anyway).
        """
        prod = np.ones(ds.n)
        for model in self.models:
            if model.constant_probability is not None:
                prod = prod * model.constant_probability
                continue
            design = np.column_stack(
                [np.ones(ds.n)] + [ds.column(name) for name in model.kept]
            )
            eta = design @ model.fit.params
            prod = prod * (1.0 / (1.0 + np.exp(-eta)))
        return prod


def _wald_pvalues(fit: FitResult) -> np.ndarray:
    se = fit.se()
    z = np.divide(fit.params, se, out=np.full_like(fit.params, np.inf), where=se > 0)
    return 2.0 * stats.norm.sf(np.abs(z))


def fit_pom(ds: TrialDataset, spec: PomSpec | None = None) -> PomFits:
    """Fit the cascade of probability-of-missingness models.

    Each indicator's logistic model is fitted on the subjects still
    observed at the previous stage; backward stepwise elimination removes
    the largest-p regressor until every remaining one is below the
    threshold.  An intercept-only (empty) model is allowed; an indicator
    with no missingness at its stage is recorded as a constant probability
    of one.
    """
    if spec is None:
        spec = default_pom_spec(ds)
    indicators = {"r0": ds.r0, "r1": ds.r1, "r2": ds.r2}
    at_risk = np.ones(ds.n, dtype=bool)
    models = []
    for indicator in spec.order:
        r = indicators[indicator].astype(float)
        rows = np.flatnonzero(at_risk)
        if rows.size == 0:
            # everyone already lost earlier in the cascade
            models.append(
                PomModel(
                    indicator=indicator,
                    target=INDICATOR_VARS[indicator],
                    kept=[],
                    fit=None,
                    constant_probability=0.0,
                    at_risk=0,
                )
            )
            continue
        y = r[rows]
        if y.min() == y.max():
            prob = float(y[0])
            models.append(
                PomModel(
                    indicator=indicator,
                    target=INDICATOR_VARS[indicator],
                    kept=[],
                    fit=None,
                    constant_probability=prob,
                    at_risk=rows.size,
                )
            )
            at_risk = at_risk & (indicators[indicator] == 1)
            continue
        names = list(spec.candidates.get(indicator, []))
        for name in names:
            col = ds.column(name)[rows]
            if np.isnan(col).any():
                raise ValidationError(
                    f"candidate {name!r} for {indicator} has missing values on the at-risk set"
                )
        dropped = []
        while True:
            design = np.column_stack(
                [np.ones(rows.size)] + [ds.column(name)[rows] for name in names]
            )
            fit = logistic(design, y, names=["const"] + names)
            if not names:
                break
            pvals = _wald_pvalues(fit)[1:]
            worst = int(np.argmax(pvals))
            if pvals[worst] < spec.p_threshold:
                break
            dropped.append((names[worst], float(pvals[worst])))
            names.pop(worst)
        models.append(
            PomModel(
                indicator=indicator,
                target=INDICATOR_VARS[indicator],
                kept=names,
                fit=fit,
                constant_probability=None,
                at_risk=rows.size,
                dropped=dropped,
            )
        )
        at_risk = at_risk & (indicators[indicator] == 1)
    return PomFits(models=models, order=spec.order, spec=spec)


@dataclass
class WeightVector:
    """Inverse-probability-of-observation weights (zero for incomplete cases)."""

    weights: np.ndarray
    stabilized: bool
    truncation_quantile: float | None
    diagnostics: dict = field(default_factory=dict)


def ipw_weights(
    ds: TrialDataset,
    pom: PomFits,
    truncation_quantile: float | None = None,
    stabilize: bool = False,
) -> WeightVector:
    """Weights for complete cases: the inverse product of the fitted
    observation probabilities along the cascade.

    Optional truncation caps weights at the given quantile of the
    complete-case weight distribution.  `stabilize` multiplies by the
    marginal complete fraction so weights average roughly one.
    """
    complete = (ds.r0 == 1) & (ds.r1 == 1) & (ds.r2 == 1)
    if not complete.any():
        raise PositivityError("no complete cases to weight")
    probs = pom.probabilities(ds)
    w = np.zeros(ds.n)
    pc = probs[complete]
    if np.any(~np.isfinite(pc)) or np.any(pc <= 0):
        raise PositivityError(
            "a complete case has fitted observation probability 0; weighting cannot proceed"
        )
    w[complete] = 1.0 / pc
    if stabilize:
        w[complete] *= complete.mean()
    truncated = 0
    if truncation_quantile is not None:
        cap = float(np.quantile(w[complete], truncation_quantile))
        truncated = int((w[complete] > cap).sum())
        w[complete] = np.minimum(w[complete], cap)
    wc = w[complete]
    diag = {
        "n_complete": int(complete.sum()),
        "mean": float(wc.mean()),
        "max": float(wc.max()),
        "truncated": truncated,
    }
    if wc.max() > 10.0 * wc.mean():
        warnings.warn(
            f"unstable weights: max {wc.max():.2f} exceeds 10x the mean {wc.mean():.2f}"
        )
    return WeightVector(
        weights=w,
        stabilized=stabilize,
        truncation_quantile=truncation_quantile,
        diagnostics=diag,
    )


@dataclass
class ImputationSet:
    """M completed datasets plus the record of which cells were imputed."""

    datasets: list[TrialDataset]
    imputed: dict[str, np.ndarray]
    m: int
    k: int
    cycles: int
    seed: int

    @property
    def variables(self) -> list[str]:
        return [v for v, mask in self.imputed.items() if mask.any()]


def _impute_arm(ds, rows, variables, order, k, cycles, rng):
    """Chained-equations PMM within one randomisation arm; returns filled columns."""
    filled = {v: ds.column(v)[rows].copy() for v in variables}
    others = {v: ds.column(v)[rows] for v in ("d",)}
    miss = {v: np.isnan(filled[v]) for v in variables}
    # initial fill: random draws from the observed values in this arm
    for v in order:
        obs_vals = filled[v][~miss[v]]
        if obs_vals.size == 0:
            raise ImputationError(f"no observed values of {v!r} in one randomisation arm")
        if miss[v].any():
            filled[v][miss[v]] = rng.choice(obs_vals, size=int(miss[v].sum()), replace=True)
    for _ in range(cycles):
        for v in order:
            idx_mis = np.flatnonzero(miss[v])
            if idx_mis.size == 0:
                continue
            idx_obs = np.flatnonzero(~miss[v])
            if idx_obs.size < k:
                raise ImputationError(
                    f"only {idx_obs.size} observed donors for {v!r} in one arm; "
                    f"reduce the donor count below k={k}"
                )
            predictors = ["d"] + [u for u in variables if u != v]
            cols = [others[u] if u in others else filled[u] for u in predictors]
            # constant columns (e.g. receipt under perfect compliance) carry
            # no information within the arm and would break the solve
            keep = [i for i, c in enumerate(cols) if np.ptp(c) > 1e-12]
            design = np.column_stack([np.ones(rows.size)] + [cols[i] for i in keep])
            x_obs = design[idx_obs]
            y_obs = filled[v][idx_obs]
            beta_hat, xtx_inv = _qr_solve(x_obs, y_obs, ["const"] + [predictors[i] for i in keep])
            resid = y_obs - x_obs @ beta_hat
            dof = max(idx_obs.size - design.shape[1], 1)
            sigma2 = float(resid @ resid) / rng.chisquare(dof)
            a = sigma2 * xtx_inv
            jitter = 1e-12 * max(np.trace(a) / a.shape[0], 1.0)
            chol = np.linalg.cholesky(a + jitter * np.eye(design.shape[1]))
            beta_star = beta_hat + chol @ rng.standard_normal(design.shape[1])
            pred_obs = x_obs @ beta_hat
            pred_mis = design[idx_mis] @ beta_star
            # k nearest predicted means via a sorted window
            sort_idx = np.argsort(pred_obs, kind="stable")
            sorted_pred = pred_obs[sort_idx]
            pos = np.searchsorted(sorted_pred, pred_mis)
            window = np.arange(-k, k)
            cand = np.clip(pos[:, None] + window[None, :], 0, idx_obs.size - 1)
            dist = np.abs(sorted_pred[cand] - pred_mis[:, None])
            # mask duplicate clipped candidates so each donor appears once
            dup = np.zeros_like(dist, dtype=bool)
            dup[:, 1:] = cand[:, 1:] == cand[:, :-1]
            dist[dup] = np.inf
            nearest = np.argsort(dist, axis=1, kind="stable")[:, :k]
            pick = rng.integers(0, k, size=idx_mis.size)
            donor_sorted = nearest[np.arange(idx_mis.size), pick]
            donors = sort_idx[cand[np.arange(idx_mis.size), donor_sorted]]
            filled[v][idx_mis] = y_obs[donors]
    return filled


def mi_impute(
    ds: TrialDataset, m: int, k: int = 5, cycles: int = 10, seed: int = 0
) -> ImputationSet:
    """Multiple imputation by chained equations with predictive mean matching.

    Incomplete variables (baseline utility, cost, QALYs and any incomplete
    covariate) are imputed in increasing-missingness order; each step fits
    a linear model of the target on treatment receipt and the other
    analysis variables, perturbs its parameters with a proper posterior
    draw, and copies the observed value of one of the `k` nearest
    predicted-mean donors.  Models and donors are stratified by randomised
    arm.  Deterministic given `seed`.
    """
    if m < 1:
        raise ValidationError("m must be at least 1")
    analysis_vars = list(ds.covariates) + ["y1", "y2"]
    miss_counts = {v: int(np.isnan(ds.column(v)).sum()) for v in analysis_vars}
    to_impute = [v for v in analysis_vars if miss_counts[v] > 0]
    order = sorted(to_impute, key=lambda v: (miss_counts[v], analysis_vars.index(v)))
    imputed = {v: np.isnan(ds.column(v)) for v in analysis_vars}

    streams = np.random.SeedSequence(seed).spawn(m)
    datasets = []
    for stream in streams:
        rng = np.random.default_rng(stream)
        if not order:
            datasets.append(ds)
            continue
        new_cols = {v: ds.column(v).copy() for v in order}
        for arm in (0, 1):
            rows = np.flatnonzero(ds.z == arm)
            if rows.size == 0:
                raise ImputationError(f"randomisation arm {arm} is empty")
            filled = _impute_arm(ds, rows, analysis_vars, order, k, cycles, rng)
            for v in order:
                new_cols[v][rows] = filled[v]
        y1 = new_cols.pop("y1", None)
        y2 = new_cols.pop("y2", None)
        datasets.append(ds.with_values(y1=y1, y2=y2, covariates=new_cols))
    return ImputationSet(datasets=datasets, imputed=imputed, m=m, k=k, cycles=cycles, seed=seed)


@dataclass
class PooledEstimate:
    """Rubin-pooled coefficients with within/between/total variance."""

    estimate: np.ndarray
    within: np.ndarray
    between: np.ndarray
    total: np.ndarray
    df: np.ndarray
    m: int

    @property
    def theta(self) -> np.ndarray:
        return self.estimate

    @property
    def cov(self) -> np.ndarray:
        return self.total

    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.total))

    def conf_int(self, alpha: float = 0.05) -> np.ndarray:
        se = self.se()
        crit = np.array(
            [
                stats.t.ppf(1 - alpha / 2, df) if np.isfinite(df) else stats.norm.ppf(1 - alpha / 2)
                for df in self.df
            ]
        )
        return np.column_stack([self.estimate - crit * se, self.estimate + crit * se])


def rubin_pool(estimates, covariances) -> PooledEstimate:
    """Combine per-imputation estimates: T = W + (1 + 1/M) B.

    Degrees of freedom use the classical large-sample approximation
    (M - 1)(1 + W / ((1 + 1/M) B))^2 per component.
    """
    q = np.asarray([np.asarray(e, dtype=float).ravel() for e in estimates])
    m = q.shape[0]
    if m < 2:
        raise ValidationError("Rubin pooling needs at least two imputations")
    covs = [np.atleast_2d(np.asarray(c, dtype=float)) for c in covariances]
    if len(covs) != m:
        raise ValidationError("one covariance per estimate is required")
    qbar = q.mean(axis=0)
    within = np.mean(covs, axis=0)
    centered = q - qbar
    between = centered.T @ centered / (m - 1)
    total = within + (1.0 + 1.0 / m) * between
    w_diag = np.diag(within)
    b_diag = np.diag(between)
    df = np.empty(qbar.shape[0])
    for j in range(df.size):
        if b_diag[j] <= 0:
            df[j] = np.inf
        else:
            r = (1.0 + 1.0 / m) * b_diag[j]
            df[j] = (m - 1) * (1.0 + w_diag[j] / r) ** 2
    return PooledEstimate(estimate=qbar, within=within, between=between, total=total, df=df, m=m)


def pool_cace(results) -> PooledEstimate:
    """Rubin-pool objects exposing `theta` and `cov` (e.g. CaceEstimate)."""
    return rubin_pool([r.theta for r in results], [r.cov for r in results])


def pattern_mixture_offset(imp: ImputationSet, deltas: dict) -> ImputationSet:
    """Shift imputed cells by per-variable, per-arm offsets.

    `deltas` maps a variable name to {arm: offset}; only cells that were
    imputed move, so zero offsets reproduce the input exactly.  Offsets for
    variables without imputed cells trigger a configuration warning.
    """
    for variable, per_arm in deltas.items():
        if variable not in imp.imputed:
            raise ValidationError(f"unknown variable {variable!r} in offset specification")
        if not imp.imputed[variable].any() and any(v != 0 for v in per_arm.values()):
            warnings.warn(f"offset specified for {variable!r} but no cells were imputed")
    datasets = []
    for ds in imp.datasets:
        y1, y2 = ds.y1.copy(), ds.y2.copy()
        covs = {name: col.copy() for name, col in ds.covariates.items()}
        columns = {"y1": y1, "y2": y2, **covs}
        for variable, per_arm in deltas.items():
            mask = imp.imputed[variable]
            for arm, delta in per_arm.items():
                if arm not in (0, 1):
                    raise ValidationError(f"arm must be 0 or 1, got {arm!r}")
                columns[variable][mask & (ds.z == arm)] += delta
        datasets.append(ds.with_values(y1=y1, y2=y2, covariates=covs))
    return ImputationSet(
        datasets=datasets, imputed=imp.imputed, m=imp.m, k=imp.k, cycles=imp.cycles, seed=imp.seed
    )

"""Compliance-adjusted causal estimators.

Random assignment serves as the instrument for treatment receipt.  For the
bivariate cost/QALY case the three-stage estimator combines per-outcome
two-stage least squares with an FGLS solve of the stacked system, so the
joint covariance of the two effects is available for net-benefit inference.
Two-stage estimators with a logistic second stage cover binary endpoints.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import TrialDataset
from .exceptions import InstrumentError, ValidationError
from .linreg import (
    FitResult,
    SystemEstimate,
    _qr_solve,
    estimate_residual_cov,
    fgls_system,
    logistic,
    ols,
)

WEAK_F_THRESHOLD = 10.0
OUTCOME_LABELS = {"y1": "cost", "y2": "qaly"}


@dataclass
class CaceEstimate:
    """Joint effect estimate on (cost, QALY) with its 2x2 covariance."""

    theta: np.ndarray
    cov: np.ndarray
    estimand: str
    nobs: int
    first_stage_coef: float | None = None
    first_stage_f: float | None = None
    system: SystemEstimate | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def theta1(self) -> float:
        return float(self.theta[0])

    @property
    def theta2(self) -> float:
        return float(self.theta[1])

    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))


def _weight_array(ds, weights):
    if weights is None:
        return None
    w = getattr(weights, "weights", weights)
    w = np.asarray(w, dtype=float).ravel()
    if w.shape[0] != ds.n:
        raise ValidationError("weights must have one entry per subject")
    return w


def _analysis_frame(ds, outcomes, covariates, weights):
    """Complete-case rows, design pieces and weights for an estimation run."""
    needed = list(outcomes) + list(covariates)
    mask = ds.complete_mask(needed)
    w = _weight_array(ds, weights)
    if w is not None:
        mask &= w > 0
    if not mask.any():
        raise ValidationError("no complete cases available for this analysis")
    sub = ds.subset(mask)
    wsub = w[mask] if w is not None else None
    xcov = np.column_stack([sub.column(c) for c in covariates]) if covariates else np.empty((sub.n, 0))
    return sub, xcov, wsub


def wald_cace(z, d, y) -> float:
    """{E(Y|Z=1) - E(Y|Z=0)} / {E(D|Z=1) - E(D|Z=0)} for a binary instrument."""
    z = np.asarray(z, dtype=float).ravel()
    d = np.asarray(d, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if z.shape != d.shape or z.shape != y.shape:
        raise ValidationError("z, d and y must have equal length")
    arm1 = z == 1
    arm0 = z == 0
    if not arm1.any() or not arm0.any():
        raise InstrumentError("both assignment arms must be nonempty")
    denom = d[arm1].mean() - d[arm0].mean()
    if abs(denom) < 1e-12:
        raise InstrumentError(
            "assignment does not predict treatment received (equal receipt rates in both arms)"
        )
    return float((y[arm1].mean() - y[arm0].mean()) / denom)


def _first_stage(sub, xcov, w):
    """Regress receipt on assignment (+covariates); return fit, fitted D and F."""
    n = sub.n
    design = np.column_stack([np.ones(n), sub.z.astype(float), xcov])
    names = ["const", "z"] + [f"x{i}" for i in range(xcov.shape[1])]
    fit = ols(design, sub.d.astype(float), weights=w, names=names)
    alpha1 = float(fit.params[1])
    se = fit.se()[1]
    if se == 0 or not np.isfinite(se):
        raise InstrumentError("degenerate first stage: assignment carries no information")
    f_stat = float((alpha1 / se) ** 2)
    if abs(alpha1) < 1e-12:
        raise InstrumentError("assignment does not predict treatment received (first stage is flat)")
    if f_stat < WEAK_F_THRESHOLD:
        warnings.warn(f"weak instrument: first-stage F = {f_stat:.2f} < {WEAK_F_THRESHOLD:g}")
    return fit, fit.fitted, alpha1, f_stat


def _tsls_core(sub, y, xcov, w, robust, cov_names):
    first, d_hat, alpha1, f_stat = _first_stage(sub, xcov, w)
    n = sub.n
    names = ["const", "d"] + list(cov_names)
    x_actual = np.column_stack([np.ones(n), sub.d.astype(float), xcov])
    x_proj = np.column_stack([np.ones(n), d_hat, xcov])
    sw = np.ones(n) if w is None else np.sqrt(w)
    beta, xtx_inv = _qr_solve(x_proj * sw[:, None], y * sw, names)
    resid = y - x_actual @ beta  # residuals use actual receipt, not the projection
    k = x_proj.shape[1]
    wvec = np.ones(n) if w is None else w
    rss = float(wvec @ (resid**2))
    dof = n - k
    scale = rss / dof if dof > 0 else float("nan")
    if robust:
        meat = (x_proj * (wvec**2 * resid**2)[:, None]).T @ x_proj
        cov = xtx_inv @ meat @ xtx_inv
        if dof > 0:
            cov *= n / dof
        cov_type = "robust"
    else:
        cov = scale * xtx_inv
        cov_type = "classical"
    return FitResult(
        params=beta,
        cov=cov,
        residuals=resid,
        nobs=n,
        names=names,
        cov_type=cov_type,
        scale=scale,
        fitted=x_actual @ beta,
        diagnostics={
            "first_stage_coef": alpha1,
            "first_stage_f": f_stat,
            "first_stage": first,
            "d_hat": d_hat,
        },
    )


def tsls(ds: TrialDataset, outcome: str, covariates=(), weights=None, robust: bool = True) -> FitResult:
    """Two-stage least squares for one outcome.

    Stage 1 regresses receipt on assignment and the covariates; stage 2
    regresses the outcome on fitted receipt and the same covariates.  The
    reported covariance is the conventional IV asymptotic variance built
    from second-stage residuals evaluated at actual receipt; `robust=True`
    (default) uses the heteroscedasticity-robust sandwich.  The first-stage
    F statistic is reported and a warning is emitted below 10.
    """
    covariates = list(covariates)
    sub, xcov, w = _analysis_frame(ds, [outcome], covariates, weights)
    y = sub.column(outcome)
    return _tsls_core(sub, y, xcov, w, robust, covariates)


def three_sls(ds: TrialDataset, covariates=(), weights=None, robust: bool = True) -> CaceEstimate:
    """Joint compliance-adjusted effects on cost and QALYs.

    Per-outcome two-stage least squares provides consistent point estimates
    and residuals; the residual covariance across the two outcome equations
    then feeds an FGLS solve of the stacked system, yielding the joint
    covariance of the two effects.
    """
    covariates = list(covariates)
    sub, xcov, w = _analysis_frame(ds, ["y1", "y2"], covariates, weights)
    fits = [_tsls_core(sub, sub.column(o), xcov, w, robust, covariates) for o in ("y1", "y2")]
    n = sub.n
    names = ["const", "d"] + covariates
    x_proj = np.column_stack([np.ones(n), fits[0].diagnostics["d_hat"], xcov])
    ks = [x_proj.shape[1]] * 2
    sigma = estimate_residual_cov([f.residuals for f in fits], ks, w)
    system = fgls_system(
        [(x_proj, sub.column("y1")), (x_proj, sub.column("y2"))],
        residual_cov=sigma,
        weights=w,
        robust=False,
        names=[names, names],
    )
    # residuals and (optionally) the sandwich must use actual receipt
    x_actual = np.column_stack([np.ones(n), sub.d.astype(float), xcov])
    residuals = [sub.column(o) - x_actual @ p for o, p in zip(("y1", "y2"), system.params)]
    cov = system.cov
    cov_type = "classical"
    if robust:
        sigma_inv = np.linalg.inv(sigma)
        wvec = np.ones(n) if w is None else w
        k = x_proj.shape[1]
        scores = np.zeros((n, 2 * k))
        for a in range(2):
            acc = sigma_inv[a, 0] * residuals[0] + sigma_inv[a, 1] * residuals[1]
            scores[:, a * k:(a + 1) * k] = x_proj * (wvec * acc)[:, None]
        bread_inv = system.cov  # classical (X'(S^-1 (x) W)X)^{-1}
        meat = scores.T @ scores
        cov = bread_inv @ meat @ bread_inv
        dof = n - k
        if dof > 0:
            cov *= n / dof
        cov_type = "robust"
    system = SystemEstimate(
        params=system.params,
        cov=cov,
        resid_cov=sigma,
        residuals=residuals,
        nobs=n,
        names=system.names,
        cov_type=cov_type,
    )
    idx = [1, len(names) + 1]  # receipt coefficient in each equation block
    theta = np.array([system.params[0][1], system.params[1][1]])
    joint = cov[np.ix_(idx, idx)]
    return CaceEstimate(
        theta=theta,
        cov=joint,
        estimand="CACE",
        nobs=n,
        first_stage_coef=fits[0].diagnostics["first_stage_coef"],
        first_stage_f=fits[0].diagnostics["first_stage_f"],
        system=system,
        diagnostics={"per_outcome_tsls": fits},
    )


def _sur_effect(sub, xcov, w, robust, covariates, regressor, label):
    n = sub.n
    names = ["const", regressor] + list(covariates)
    reg = sub.z.astype(float) if regressor == "z" else sub.d.astype(float)
    design = np.column_stack([np.ones(n), reg, xcov])
    system = fgls_system(
        [(design, sub.column("y1")), (design, sub.column("y2"))],
        weights=w,
        robust=robust,
        names=[names, names],
    )
    idx = [1, len(names) + 1]
    theta = np.array([system.params[0][1], system.params[1][1]])
    return CaceEstimate(
        theta=theta,
        cov=system.cov[np.ix_(idx, idx)],
        estimand=label,
        nobs=n,
        system=system,
    )


def itt_sur(ds: TrialDataset, covariates=(), weights=None, robust: bool = True) -> CaceEstimate:
    """Intention-to-treat effects from a SUR of both outcomes on assignment."""
    covariates = list(covariates)
    sub, xcov, w = _analysis_frame(ds, ["y1", "y2"], covariates, weights)
    return _sur_effect(sub, xcov, w, robust, covariates, "z", "ITT")


def pp_sur(ds: TrialDataset, covariates=(), weights=None, robust: bool = True) -> CaceEstimate:
    """Per-protocol effects: subjects departing from assignment are excluded.

    Liable to bias when departures are prognosis-driven; provided as the
    comparator the simulation harness is designed to expose.
    """
    covariates = list(covariates)
    keep = ds.z == ds.d
    if not keep.any():
        raise ValidationError("per-protocol sample is empty: every subject departed from assignment")
    w = _weight_array(ds, weights)
    pp = ds.subset(keep)
    wpp = w[keep] if w is not None else None
    sub, xcov, wsub = _analysis_frame(pp, ["y1", "y2"], covariates, wpp)
    return _sur_effect(sub, xcov, wsub, robust, covariates, "z", "PP")


def _binary_outcome(sub, outcome):
    y = sub.column(outcome)
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValidationError(f"{outcome} must be binary 0/1 for a logistic second stage")
    return y


def tsps(ds: TrialDataset, outcome: str, covariates=(), weights=None) -> FitResult:
    """Two-stage predictor substitution for a binary outcome.

    Linear first stage of receipt on assignment, then a logistic regression
    of the outcome on fitted receipt (plus covariates).  Returns log-odds
    coefficients; biased for the conditional odds ratio when the
    receipt-outcome association given assignment is strong.
    """
    covariates = list(covariates)
    sub, xcov, w = _analysis_frame(ds, [outcome], covariates, weights)
    if w is not None:
        raise ValidationError("weighted logistic stages are not supported")
    y = _binary_outcome(sub, outcome)
    _, d_hat, alpha1, f_stat = _first_stage(sub, xcov, None)
    design = np.column_stack([np.ones(sub.n), d_hat, xcov])
    fit = logistic(design, y, names=["const", "d"] + covariates)
    fit.diagnostics.update({"first_stage_coef": alpha1, "first_stage_f": f_stat, "method": "2SPS"})
    return fit


def tsri(ds: TrialDataset, outcome: str, covariates=(), weights=None) -> FitResult:
    """Two-stage residual inclusion for a binary outcome.

    The logistic second stage includes actual receipt and the first-stage
    residual.  Asymptotically unbiased for the conditional log odds ratio
    only without unmeasured confounding: logistic non-collapsibility means
    the estimate conditions on whatever the residual proxies for.
    """
    covariates = list(covariates)
    sub, xcov, w = _analysis_frame(ds, [outcome], covariates, weights)
    if w is not None:
        raise ValidationError("weighted logistic stages are not supported")
    y = _binary_outcome(sub, outcome)
    first, d_hat, alpha1, f_stat = _first_stage(sub, xcov, None)
    resid0 = sub.d.astype(float) - d_hat
    design = np.column_stack([np.ones(sub.n), sub.d.astype(float), resid0, xcov])
    fit = logistic(design, y, names=["const", "d", "first_stage_resid"] + covariates)
    fit.diagnostics.update({"first_stage_coef": alpha1, "first_stage_f": f_stat, "method": "2SRI"})
    return fit

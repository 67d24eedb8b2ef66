"""Cost-effectiveness summaries: INB, ICER and acceptability curves.

The incremental net benefit at willingness-to-pay ``lam`` is
``lam * inc_qaly - inc_cost``; its variance follows from the joint
covariance of the two incremental effects as for any linear combination.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .exceptions import RatioUndefinedError, ValidationError

Z975 = 1.959963984540054


@dataclass
class CeaResult:
    """Incremental cost/QALY pair with its INB summary at one threshold."""

    inc_cost: float
    inc_qaly: float
    cov: np.ndarray
    lam: float
    inb: float
    inb_se: float
    ci: tuple[float, float]
    estimand: str = ""
    missing_method: str = ""
    method: str = "wald"
    extras: dict = field(default_factory=dict)


def inb(est, lam: float, df: float | None = None, estimand=None, missing_method="") -> CeaResult:
    """Incremental net benefit with delta-method variance.

    Parameters
    ----------
    est : object with ``theta`` (2-vector: cost, QALY) and ``cov`` (2x2)
        Typically a :class:`~trialcea.iv.CaceEstimate`.
    lam : float
        Willingness to pay per QALY.
    df : float, optional
        Degrees of freedom for a t interval (pooled multiple-imputation
        estimates); the default is the normal 95% interval.
    """
    theta = np.asarray(est.theta, dtype=float)
    cov = np.asarray(est.cov, dtype=float)
    if theta.shape != (2,) or cov.shape != (2, 2):
        raise ValidationError("expected a 2-vector of effects with a 2x2 covariance")
    point = lam * theta[1] - theta[0]
    var = lam**2 * cov[1, 1] + cov[0, 0] - 2.0 * lam * cov[0, 1]
    if var < 0:
        raise ValidationError(f"computed INB variance is negative ({var!r}); covariance: {cov.tolist()}")
    se = math.sqrt(var)
    crit = Z975 if df is None or not np.isfinite(df) else float(stats.t.ppf(0.975, df))
    return CeaResult(
        inc_cost=float(theta[0]),
        inc_qaly=float(theta[1]),
        cov=cov,
        lam=float(lam),
        inb=float(point),
        inb_se=se,
        ci=(float(point - crit * se), float(point + crit * se)),
        estimand=estimand if estimand is not None else getattr(est, "estimand", ""),
        missing_method=missing_method,
    )


@dataclass
class IcerResult:
    value: float
    quadrant: str
    inc_cost: float
    inc_qaly: float


def icer(est) -> IcerResult:
    """Incremental cost-effectiveness ratio with quadrant annotation."""
    theta = np.asarray(est.theta, dtype=float)
    dc, dq = float(theta[0]), float(theta[1])
    if dq == 0.0:
        raise RatioUndefinedError(
            "incremental QALY is zero: the ICER is undefined, report the INB instead"
        )
    if dc <= 0 and dq > 0:
        quadrant = "dominant"  # cheaper and more effective
    elif dc > 0 and dq < 0:
        quadrant = "dominated"  # dearer and less effective
    else:
        quadrant = "trade-off"
    return IcerResult(value=dc / dq, quadrant=quadrant, inc_cost=dc, inc_qaly=dq)


@dataclass
class CeacCurve:
    lambdas: np.ndarray
    probabilities: np.ndarray
    source: str  # 'normal' or 'draws'

    def as_rows(self):
        return [
            {"lambda": float(l), "p_cost_effective": float(p)}
            for l, p in zip(self.lambdas, self.probabilities)
        ]


def ceac(est, grid) -> CeacCurve:
    """P(INB > 0) over a willingness-to-pay grid.

    `est` is either an effect estimate with a 2x2 covariance (normal
    approximation) or posterior draws exposing per-draw effects via
    ``effect_draws()`` (empirical fraction of draws with positive INB).
    """
    grid = np.asarray(grid, dtype=float).ravel()
    if grid.size == 0:
        raise ValidationError("the willingness-to-pay grid is empty")
    draws = getattr(est, "effect_draws", None)
    if callable(draws):
        cost, qaly = draws()
        probs = np.array([(lam * qaly - cost > 0).mean() for lam in grid])
        return CeacCurve(lambdas=grid, probabilities=probs, source="draws")
    theta = np.asarray(est.theta, dtype=float)
    cov = np.asarray(est.cov, dtype=float)
    probs = np.empty(grid.size)
    for i, lam in enumerate(grid):
        point = lam * theta[1] - theta[0]
        var = lam**2 * cov[1, 1] + cov[0, 0] - 2.0 * lam * cov[0, 1]
        if var <= 0:
            probs[i] = 1.0 if point > 0 else (0.5 if point == 0 else 0.0)
        else:
            probs[i] = stats.norm.cdf(point / math.sqrt(var))
    return CeacCurve(lambdas=grid, probabilities=probs, source="normal")


def default_grid(stop: float = 50_000.0, step: float = 1_000.0) -> np.ndarray:
    return np.arange(0.0, stop + step / 2, step)

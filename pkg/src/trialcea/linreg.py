"""Least-squares kernels: OLS, logistic IRLS and FGLS over equation systems.

Everything here is a pure function of immutable arrays.  Linear solves go
through a rank-revealing QR with a relative singularity threshold of 1e-10;
rank-deficient designs raise ``SingularityError`` naming the offending
columns rather than silently pinning coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla

from .exceptions import ConvergenceError, SeparationError, SingularityError, ValidationError

RANK_RTOL = 1e-10
IRLS_MAX_ITER = 50
IRLS_TOL = 1e-8
SEPARATION_NORM = 1e4


@dataclass
class FitResult:
    """Coefficients with covariance matrix, residuals and diagnostics."""

    params: np.ndarray
    cov: np.ndarray
    residuals: np.ndarray
    nobs: int
    names: list[str] = field(default_factory=list)
    cov_type: str = "classical"
    scale: float = float("nan")
    fitted: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))

    def conf_int(self, z: float = 1.959963984540054) -> np.ndarray:
        se = self.se()
        return np.column_stack([self.params - z * se, self.params + z * se])


@dataclass
class SystemEstimate:
    """Joint estimate for a stacked system of equations.

    `params` holds one coefficient block per equation; `cov` is the full
    cross-equation covariance of the stacked coefficient vector; `resid_cov`
    is the estimated residual covariance across equations.
    """

    params: list[np.ndarray]
    cov: np.ndarray
    resid_cov: np.ndarray
    residuals: list[np.ndarray]
    nobs: int
    names: list[list[str]] = field(default_factory=list)
    cov_type: str = "classical"

    @property
    def stacked_params(self) -> np.ndarray:
        return np.concatenate(self.params)

    def block_slices(self) -> list[slice]:
        out, start = [], 0
        for block in self.params:
            out.append(slice(start, start + block.shape[0]))
            start += block.shape[0]
        return out


def _column_names(x, names):
    if names is not None:
        return list(names)
    return [f"x{i}" for i in range(x.shape[1])]


def _check_design(x, y, weights):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(y, dtype=float).ravel()
    if x.shape[0] != y.shape[0]:
        raise ValidationError(f"design has {x.shape[0]} rows but y has {y.shape[0]}")
    if weights is not None:
        weights = np.asarray(weights, dtype=float).ravel()
        if weights.shape[0] != y.shape[0]:
            raise ValidationError("weights must have one entry per observation")
        if (weights < 0).any() or not np.isfinite(weights).all():
            raise ValidationError("weights must be nonnegative and finite")
    if not np.isfinite(x).all() or not np.isfinite(y).all():
        raise ValidationError("design and response must be finite (drop incomplete rows first)")
    return x, y, weights


def _qr_solve(xw, yw, names):
    """Solve min ||xw b - yw|| via pivoted QR; raise on rank deficiency."""
    q, r, piv = sla.qr(xw, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    k = xw.shape[1]
    if diag.size == 0 or diag[0] == 0.0:
        raise SingularityError("design matrix is zero", columns=names)
    rank = int(np.sum(diag > RANK_RTOL * diag[0]))
    if rank < k:
        bad = [names[j] for j in piv[rank:]]
        raise SingularityError(
            f"design matrix is rank deficient (rank {rank} of {k}); offending columns: {bad}",
            columns=bad,
        )
    beta_piv = sla.solve_triangular(r, q.T @ yw)
    beta = np.empty(k)
    beta[piv] = beta_piv
    # (X'X)^{-1} from the R factor, undoing the column pivot
    rinv = sla.solve_triangular(r, np.eye(k))
    xtx_inv_piv = rinv @ rinv.T
    xtx_inv = np.empty((k, k))
    xtx_inv[np.ix_(piv, piv)] = xtx_inv_piv
    return beta, xtx_inv


def ols(design, y, weights=None, robust: bool = False, names=None) -> FitResult:
    """(Weighted) ordinary least squares.

    Parameters
    ----------
    design : array (n, k)
        Full-column-rank design matrix (include the intercept column).
    y : array (n,)
    weights : array (n,), optional
        Nonnegative multiplicative weights on squared residuals.
    robust : bool
        If True the covariance is the HC1 sandwich; otherwise the classical
        estimate sigma^2 (X'WX)^{-1} with sigma^2 = RSS_w / (n - k).
    """
    x, y, w = _check_design(design, y, weights)
    names = _column_names(x, names)
    n, k = x.shape
    if w is None:
        xw, yw = x, y
    else:
        sw = np.sqrt(w)
        xw, yw = x * sw[:, None], y * sw
    beta, xtx_inv = _qr_solve(xw, yw, names)
    resid = y - x @ beta
    wvec = np.ones(n) if w is None else w
    rss = float(wvec @ (resid**2))
    dof = n - k
    scale = rss / dof if dof > 0 else float("nan")
    if robust:
        meat = (x * (wvec**2 * resid**2)[:, None]).T @ x
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
        fitted=x @ beta,
    )


def _logit_loglik(x, y, beta):
    eta = x @ beta
    # log(1 + exp(eta)) computed stably
    return float(y @ eta - np.logaddexp(0.0, eta).sum())


def logistic(design, y, names=None, max_iter: int = IRLS_MAX_ITER, tol: float = IRLS_TOL) -> FitResult:
    """Logistic regression fitted by iteratively reweighted least squares.

    Stops when the score satisfies max|X'(y - p)| <= tol * max(1, max|X'y|).
    Raises ``SeparationError`` when the outcome is constant or the
    coefficient norm diverges (perfect prediction), ``ConvergenceError``
    when the iteration cap is hit first.
    """
    x, y, _ = _check_design(design, y, None)
    names = _column_names(x, names)
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValidationError("logistic outcome must be binary 0/1")
    if y.min() == y.max():
        raise SeparationError(f"outcome is constant at {y[0]:g}; the MLE lies on the boundary")
    n, k = x.shape
    beta = np.zeros(k)
    score_scale = max(1.0, np.abs(x.T @ y).max())
    for _ in range(max_iter):
        eta = x @ beta
        p = 1.0 / (1.0 + np.exp(-eta))
        score = x.T @ (y - p)
        if np.abs(score).max() <= tol * score_scale:
            break
        w = p * (1.0 - p)
        w = np.maximum(w, 1e-12)
        z = eta + (y - p) / w
        sw = np.sqrt(w)
        beta, xtwx_inv = _qr_solve(x * sw[:, None], z * sw, names)
        if np.abs(beta).max() > SEPARATION_NORM:
            raise SeparationError(
                "coefficients diverged; some covariate pattern predicts the outcome perfectly"
            )
    else:
        raise ConvergenceError(f"IRLS did not converge in {max_iter} iterations")
    eta = x @ beta
    p = 1.0 / (1.0 + np.exp(-eta))
    if np.abs(y - p).max() < 1e-6:
        raise SeparationError(
            "fitted probabilities are numerically 0/1 for every observation "
            "(perfect prediction); the MLE lies on the boundary"
        )
    w = np.maximum(p * (1.0 - p), 1e-12)
    xtwx = (x * w[:, None]).T @ x
    cov = np.linalg.inv(xtwx)
    return FitResult(
        params=beta,
        cov=cov,
        residuals=y - p,
        nobs=n,
        names=names,
        cov_type="classical",
        scale=1.0,
        fitted=p,
        diagnostics={"loglik": _logit_loglik(x, y, beta)},
    )


def estimate_residual_cov(residuals, dofs, weights=None) -> np.ndarray:
    """sigma_{ll'} from per-equation residuals with the n - k convention.

    Cross terms use n - max(k_l, k_l'); with weights the divisor becomes
    mean(w) * (n - k) so constant weights reproduce the unweighted estimate
    exactly.
    """
    m = len(residuals)
    n = residuals[0].shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    wbar = w.mean()
    sigma = np.empty((m, m))
    for a in range(m):
        for b in range(a, m):
            dof = n - max(dofs[a], dofs[b])
            if dof <= 0:
                raise ValidationError("not enough observations for the residual covariance")
            val = float((w * residuals[a] * residuals[b]).sum()) / (wbar * dof)
            sigma[a, b] = sigma[b, a] = val
    return sigma


def _system_solve(designs, ys, sigma, weights, robust, names):
    """GLS on the stacked system given a residual covariance `sigma`."""
    m = len(designs)
    n = designs[0].shape[0]
    ks = [x.shape[1] for x in designs]
    ktot = sum(ks)
    try:
        sigma_inv = np.linalg.inv(sigma)
    except np.linalg.LinAlgError:
        raise SingularityError(
            "estimated residual covariance is singular; consider per-equation OLS instead"
        ) from None
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    offsets = np.concatenate([[0], np.cumsum(ks)])
    bread = np.zeros((ktot, ktot))
    rhs = np.zeros(ktot)
    for a in range(m):
        xa_w = designs[a] * w[:, None]
        for b in range(m):
            block = sigma_inv[a, b] * (xa_w.T @ designs[b])
            bread[offsets[a]:offsets[a + 1], offsets[b]:offsets[b + 1]] += block
            rhs[offsets[a]:offsets[a + 1]] += sigma_inv[a, b] * (xa_w.T @ ys[b])
    try:
        beta = np.linalg.solve(bread, rhs)
        bread_inv = np.linalg.inv(bread)
    except np.linalg.LinAlgError:
        raise SingularityError("stacked GLS system is singular") from None
    params = [beta[offsets[a]:offsets[a + 1]] for a in range(m)]
    residuals = [ys[a] - designs[a] @ params[a] for a in range(m)]
    if robust:
        # score of subject i: sum_b sigma^{ab} x_{ai} e_{bi}, weighted
        scores = np.zeros((n, ktot))
        for a in range(m):
            acc = np.zeros(n)
            for b in range(m):
                acc = acc + sigma_inv[a, b] * residuals[b]
            scores[:, offsets[a]:offsets[a + 1]] = designs[a] * (w * acc)[:, None]
        meat = scores.T @ scores
        dof = n - max(ks)
        cov = bread_inv @ meat @ bread_inv
        if dof > 0:
            cov *= n / dof
        cov_type = "robust"
    else:
        cov = bread_inv
        cov_type = "classical"
    return SystemEstimate(
        params=params,
        cov=cov,
        resid_cov=sigma,
        residuals=residuals,
        nobs=n,
        names=names,
        cov_type=cov_type,
    )


def fgls_system(
    equations,
    residual_cov=None,
    weights=None,
    robust: bool = False,
    iterate: bool = False,
    max_iter: int = 20,
    tol: float = 1e-10,
    names=None,
) -> SystemEstimate:
    """Feasible GLS over a list of (design, y) equations sharing observations.

    Stage 1 fits each equation by (weighted) OLS, estimates the residual
    covariance across equations with the n - k convention, then solves the
    stacked GLS problem.  One-step by default (the classical two-step
    estimator); `iterate=True` re-estimates the residual covariance from GLS
    residuals until the coefficients settle.

    Passing `residual_cov` skips stage 1 and uses the supplied matrix.
    """
    if not equations:
        raise ValidationError("at least one equation is required")
    designs, ys = [], []
    n = None
    for x, y in equations:
        x, y, w = _check_design(x, y, weights)
        if n is None:
            n = x.shape[0]
        elif x.shape[0] != n:
            raise ValidationError("all equations must share the same observations")
        designs.append(x)
        ys.append(y)
    m = len(designs)
    ks = [x.shape[1] for x in designs]
    if names is None:
        names = [_column_names(x, None) for x in designs]
    else:
        names = [list(block) for block in names]

    if residual_cov is not None:
        sigma = np.asarray(residual_cov, dtype=float)
        return _system_solve(designs, ys, sigma, weights, robust, names)

    stage1 = [ols(x, y, weights=weights, names=nm) for x, y, nm in zip(designs, ys, names)]
    sigma = estimate_residual_cov([f.residuals for f in stage1], ks, weights)
    est = _system_solve(designs, ys, sigma, weights, robust, names)
    if iterate:
        prev = est.stacked_params
        for _ in range(max_iter):
            sigma = estimate_residual_cov(est.residuals, ks, weights)
            est = _system_solve(designs, ys, sigma, weights, robust, names)
            if np.max(np.abs(est.stacked_params - prev)) <= tol * (1 + np.max(np.abs(prev))):
                break
            prev = est.stacked_params
    return est

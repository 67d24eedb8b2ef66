"""Bayesian bivariate reduced-form instrumental-variable model.

Receipt and both outcomes are modelled jointly as trivariate normal with
means linear in assignment: the receipt equation carries the first-stage
slope, and each outcome equation multiplies its compliance-adjusted effect
by that slope, so the causal effects are identified through the joint
system.  Sampling is Metropolis-within-Gibbs: the inverse covariance has a
conjugate Wishart update while mean parameters (whose product terms break
conjugacy) move by adaptive random-walk Metropolis, with proposal scales
frozen after burn-in.  Missing outcomes, and missing baseline covariates
given a companion normal model, are sampled as extra unknowns.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .data import TrialDataset
from .exceptions import ConvergenceError, InstrumentError, ValidationError

TARGET_ACCEPT = 0.44
RHAT_LIMIT = 1.05


@dataclass(frozen=True)
class BayesIvConfig:
    """Priors, chain layout and proposal tuning for the reduced-form model.

    Regression coefficients have independent N(0, prior_sd^2) priors on the
    internally standardised outcome scale; the inverse covariance has a
    Wishart prior with `wishart_df` degrees of freedom (weakly informative
    default: dimension + 1) and identity scale.
    """

    prior_sd: float = 10.0
    wishart_df: float = 4.0
    wishart_scale: tuple[tuple[float, ...], ...] | None = None  # default: identity
    chains: int = 4
    iterations: int = 10_000
    burnin: int = 5_000
    thin: int = 1
    seed: int = 0
    proposal_scale: float = 2.4
    covariates: tuple[str, ...] = ()
    check_convergence: bool = True

    def __post_init__(self):
        if self.chains < 2:
            raise ValidationError("at least two chains are required")
        if self.iterations <= self.burnin:
            raise ValidationError("iterations must exceed burnin")
        if self.wishart_df < 3:
            raise ValidationError("Wishart degrees of freedom must be at least the dimension (3)")
        if self.thin < 1:
            raise ValidationError("thin must be at least 1")
        if self.wishart_scale is not None:
            scale = np.asarray(self.wishart_scale, dtype=float)
            if scale.shape != (3, 3) or not np.allclose(scale, scale.T):
                raise ValidationError("wishart_scale must be a symmetric 3x3 matrix")

    def scale_matrix(self) -> np.ndarray:
        if self.wishart_scale is None:
            return np.eye(3)
        return np.asarray(self.wishart_scale, dtype=float)


@dataclass
class PosteriorDraws:
    """Retained MCMC draws (raw outcome scale) with convergence diagnostics."""

    beta: np.ndarray  # (ndraws, p)
    sigma: np.ndarray  # (ndraws, 3, 3)
    names: list[str]
    chains: int
    per_chain: int
    acceptance: dict[str, float]
    rhat: dict[str, float]
    ess: dict[str, float]
    meta: dict = field(default_factory=dict)

    def column(self, name: str) -> np.ndarray:
        return self.beta[:, self.names.index(name)]

    def effect_draws(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-draw compliance-adjusted (cost, QALY) effects."""
        return self.column("cost_effect"), self.column("qaly_effect")

    def max_rhat(self) -> float:
        return max(self.rhat.values())


def _split_rhat(chain_values: np.ndarray) -> float:
    """Potential scale reduction over split half-chains (chains, draws)."""
    m, n = chain_values.shape
    half = n // 2
    if half < 2:
        return float("nan")
    halves = np.concatenate([chain_values[:, :half], chain_values[:, half : 2 * half]], axis=0)
    means = halves.mean(axis=1)
    variances = halves.var(axis=1, ddof=1)
    w = variances.mean()
    b = half * means.var(ddof=1)
    if w <= 0:
        return 1.0
    var_plus = (half - 1) / half * w + b / half
    return float(math.sqrt(var_plus / w))


def _ess(chain_values: np.ndarray) -> float:
    """Effective sample size via Geyer's initial positive sequence."""
    m, n = chain_values.shape
    if n < 4:
        return float(m * n)
    centered = chain_values - chain_values.mean(axis=1, keepdims=True)
    nfft = 1 << int(n * 2 - 1).bit_length()
    acov = np.zeros(n)
    for c in range(m):
        f = np.fft.rfft(centered[c], nfft)
        ac = np.fft.irfft(f * np.conj(f), nfft)[:n].real
        acov += ac / n
    acov /= m
    if acov[0] <= 0:
        return float(m * n)
    rho = acov / acov[0]
    # sum consecutive pairs until a pair goes nonpositive
    tau = 1.0
    t = 1
    while t + 1 < n:
        pair = rho[t] + rho[t + 1]
        if pair <= 0:
            break
        tau += 2.0 * pair
        t += 2
    return float(m * n / tau)


class _ReducedFormModel:
    """Shared per-fit state: standardised data, parameter layout, priors."""

    def __init__(self, ds: TrialDataset, cfg: BayesIvConfig):
        if ds.z.min() == ds.z.max():
            raise InstrumentError("assignment is constant; the first-stage slope is unidentified")
        self.cfg = cfg
        self.n = ds.n
        # centring assignment and covariates decorrelates the intercepts
        # from the slopes for the single-site sampler; the intercepts are
        # shifted back exactly after sampling
        self.zbar = float(ds.z.mean())
        self.z = ds.z.astype(float) - self.zbar
        scale1 = float(np.nanstd(ds.y1))
        scale2 = float(np.nanstd(ds.y2))
        self.scales = np.array([1.0, scale1 if scale1 > 0 else 1.0, scale2 if scale2 > 0 else 1.0])
        self.obs = np.column_stack(
            [ds.d.astype(float), ds.y1 / self.scales[1], ds.y2 / self.scales[2]]
        )
        self.missing_y = np.isnan(self.obs)
        self.obs_filled = np.where(self.missing_y, 0.0, self.obs)
        self.covariates = list(cfg.covariates)
        self.x = {}
        self.x_missing = {}
        self.xbar = {}
        for name in self.covariates:
            col = ds.column(name).astype(float).copy()
            miss = np.isnan(col)
            if miss.all():
                raise ValidationError(f"covariate {name!r} has no observed values")
            center = float(np.nanmean(col))
            col = col - center
            col[miss] = 0.0
            self.x[name] = col
            self.x_missing[name] = miss
            self.xbar[name] = center
        # parameter layout: core six, then per-covariate coefficients per equation
        self.names = ["d_const", "d_z", "cost_const", "cost_effect", "qaly_const", "qaly_effect"]
        for name in self.covariates:
            self.names += [f"d_{name}", f"cost_{name}", f"qaly_{name}"]
        self.p = len(self.names)
        # missing-pattern groups over (y1, y2); receipt is always observed
        patterns = {}
        for i in range(self.n):
            key = (bool(self.missing_y[i, 1]), bool(self.missing_y[i, 2]))
            if key != (False, False):
                patterns.setdefault(key, []).append(i)
        self.y_patterns = {k: np.array(v) for k, v in patterns.items()}

    def initial_theta(self, rng):
        v = self.obs
        arm1 = self.z > 0  # centred assignment keeps the arm split
        arm0 = ~arm1
        d = v[:, 0]
        b10 = float(d[arm1].mean() - d[arm0].mean())
        if abs(b10) < 1e-6:
            b10 = 0.05 if b10 >= 0 else -0.05
        theta = np.zeros(self.p)
        theta[0], theta[1] = float(d.mean()), b10
        for eq, col in ((2, 1), (4, 2)):
            y = np.where(self.missing_y[:, col], np.nan, v[:, col])
            m1 = np.nanmean(np.where(arm1, y, np.nan))
            m0 = np.nanmean(np.where(arm0, y, np.nan))
            if not np.isfinite(m1) or not np.isfinite(m0):
                m1 = m0 = float(np.nanmean(y))
            theta[eq] = float(np.nanmean(y))
            theta[eq + 1] = (m1 - m0) / b10
        jitter = 0.05 * rng.standard_normal(self.p)
        return theta + jitter * np.maximum(1.0, np.abs(theta))

    def mean_matrix(self, theta):
        """Per-subject means (n, 3) under the reduced form."""
        b00, b10, b01, b11, b02, b12 = theta[:6]
        mu = np.empty((self.n, 3))
        mu[:, 0] = b00 + b10 * self.z
        mu[:, 1] = b01 + b11 * b10 * self.z
        mu[:, 2] = b02 + b12 * b10 * self.z
        for j, name in enumerate(self.covariates):
            g = theta[6 + 3 * j : 9 + 3 * j]
            mu += np.outer(self.x[name], g)
        return mu

    def shift_basis(self, theta, index):
        """(v, c): proposing theta[index] += delta shifts means by delta*outer(v, c)."""
        if index == 0:
            return None, np.array([1.0, 0.0, 0.0])  # v=ones
        if index == 1:
            return self.z, np.array([1.0, theta[3], theta[5]])
        if index == 2:
            return None, np.array([0.0, 1.0, 0.0])
        if index == 3:
            return self.z, np.array([0.0, theta[1], 0.0])
        if index == 4:
            return None, np.array([0.0, 0.0, 1.0])
        if index == 5:
            return self.z, np.array([0.0, 0.0, theta[1]])
        j, eq = divmod(index - 6, 3)
        c = np.zeros(3)
        c[eq] = 1.0
        return self.x[self.covariates[j]], c


def _wishart_precision(rng, df, b_matrix):
    """Draw W ~ Wishart(df, B^{-1}) via the Bartlett decomposition."""
    p = b_matrix.shape[0]
    c = np.linalg.cholesky(b_matrix)
    ls = solve_triangular(c, np.eye(p), lower=True).T  # Ls Ls' = B^{-1}
    a = np.zeros((p, p))
    for i in range(p):
        a[i, i] = math.sqrt(rng.chisquare(df - i))
    idx = np.tril_indices(p, -1)
    a[idx] = rng.standard_normal(len(idx[0]))
    la = ls @ a
    return la @ la.T


def _run_chain(model: _ReducedFormModel, seed_seq, store_every, kept_slots):
    cfg = model.cfg
    rng = np.random.default_rng(seed_seq)
    n, p = model.n, model.p
    theta = model.initial_theta(rng)
    prior_var = cfg.prior_sd**2
    wishart_df0 = cfg.wishart_df
    s0_inv = np.linalg.inv(cfg.scale_matrix())

    v = model.obs_filled.copy()
    x_current = {name: model.x[name].copy() for name in model.covariates}
    comp_mean = {name: float(col.mean()) for name, col in x_current.items()}
    comp_var = {name: max(float(col.var()), 1e-8) for name, col in x_current.items()}

    def recompute_mu():
        mu = np.empty((n, 3))
        b00, b10, b01, b11, b02, b12 = theta[:6]
        mu[:, 0] = b00 + b10 * model.z
        mu[:, 1] = b01 + b11 * b10 * model.z
        mu[:, 2] = b02 + b12 * b10 * model.z
        for j, name in enumerate(model.covariates):
            mu += np.outer(x_current[name], theta[6 + 3 * j : 9 + 3 * j])
        return mu

    mu = recompute_mu()
    resid = v - mu
    sigma_inv = np.eye(3)
    sigma = np.eye(3)

    log_step = np.full(p, math.log(cfg.proposal_scale / math.sqrt(max(n, 2))))
    accept_post = np.zeros(p)
    updates_post = 0
    zz = float(model.z @ model.z)

    beta_out = np.empty((kept_slots, p))
    sigma_out = np.empty((kept_slots, 3, 3))
    kept = 0

    any_missing_y = bool(model.y_patterns)
    missing_x_names = [nm for nm in model.covariates if model.x_missing[nm].any()]

    for it in range(cfg.iterations):
        in_burnin = it < cfg.burnin

        # --- data augmentation -------------------------------------------
        if any_missing_y:
            for (m1, m2), rows in model.y_patterns.items():
                mis = [k for k, flag in ((1, m1), (2, m2)) if flag]
                obs_idx = [k for k in range(3) if k not in mis]
                s_oo = sigma[np.ix_(obs_idx, obs_idx)]
                s_mo = sigma[np.ix_(mis, obs_idx)]
                s_mm = sigma[np.ix_(mis, mis)]
                gain = s_mo @ np.linalg.inv(s_oo)
                cond_cov = s_mm - gain @ s_mo.T
                chol = np.linalg.cholesky(cond_cov + 1e-12 * np.eye(len(mis)))
                dev = v[np.ix_(rows, obs_idx)] - mu[np.ix_(rows, obs_idx)]
                cond_mean = mu[np.ix_(rows, mis)] + dev @ gain.T
                draw = cond_mean + rng.standard_normal((rows.size, len(mis))) @ chol.T
                v[np.ix_(rows, mis)] = draw
                resid[np.ix_(rows, mis)] = draw - mu[np.ix_(rows, mis)]
        for j_name in missing_x_names:
            j = model.covariates.index(j_name)
            g = theta[6 + 3 * j : 9 + 3 * j]
            rows = np.flatnonzero(model.x_missing[j_name])
            wg = sigma_inv @ g
            precision = float(g @ wg) + 1.0 / comp_var[j_name]
            b = resid[rows] + np.outer(x_current[j_name][rows], g)
            mean = (b @ wg + comp_mean[j_name] / comp_var[j_name]) / precision
            new = mean + rng.standard_normal(rows.size) / math.sqrt(precision)
            delta = new - x_current[j_name][rows]
            x_current[j_name][rows] = new
            mu[rows] += np.outer(delta, g)
            resid[rows] -= np.outer(delta, g)
            # companion normal model parameters (flat mean, Jeffreys variance)
            col = x_current[j_name]
            comp_mean[j_name] = float(col.mean() + rng.standard_normal() * math.sqrt(comp_var[j_name] / n))
            ss = float(((col - comp_mean[j_name]) ** 2).sum())
            comp_var[j_name] = ss / rng.chisquare(n)

        # --- mean parameters: single-site random-walk Metropolis ----------
        for idx in range(p):
            vvec, c = model.shift_basis(theta, idx)
            step = math.exp(log_step[idx])
            delta = step * rng.standard_normal()
            cd = c * delta
            sc = sigma_inv @ cd
            if vvec is None:
                rv = resid.sum(axis=0)
                vnorm = float(n)
            elif vvec is model.z:
                rv = resid.T @ model.z
                vnorm = zz
            else:
                rv = resid.T @ vvec
                vnorm = float(vvec @ vvec)
            dq = -2.0 * float(sc @ rv) + vnorm * float(cd @ sc)
            new_val = theta[idx] + delta
            dprior = -0.5 * (new_val**2 - theta[idx] ** 2) / prior_var
            log_alpha = -0.5 * dq + dprior
            accepted = log_alpha >= 0 or math.log(rng.random()) < log_alpha
            if accepted:
                theta[idx] = new_val
                if vvec is None:
                    resid -= cd
                else:
                    resid -= np.outer(vvec, cd)
            if in_burnin:
                rate = (it + 1) ** -0.6
                log_step[idx] += rate * ((1.0 if accepted else 0.0) - TARGET_ACCEPT)
            else:
                accept_post[idx] += 1.0 if accepted else 0.0
        if not in_burnin:
            updates_post += 1

        # shift_basis for the slope uses current effect values, and mu must
        # track (theta, x); rebuild defensively once per iteration
        mu = recompute_mu()
        resid = v - mu

        # --- precision matrix: conjugate Wishart ---------------------------
        b_matrix = s0_inv + resid.T @ resid
        sigma_inv = _wishart_precision(rng, wishart_df0 + n, b_matrix)
        sigma = np.linalg.inv(sigma_inv)

        if not in_burnin and (it - cfg.burnin) % store_every == 0 and kept < kept_slots:
            beta_out[kept] = theta
            sigma_out[kept] = sigma
            kept += 1

    acc = accept_post / max(updates_post, 1)
    return beta_out[:kept], sigma_out[:kept], acc


def fit_bayes_iv(ds: TrialDataset, cfg: BayesIvConfig | None = None) -> PosteriorDraws:
    """Sample the joint posterior of the reduced-form mean parameters and
    the 3x3 covariance.

    The compliance-adjusted effects are the `cost_effect` and `qaly_effect`
    coordinates.  Outcomes are standardised by their observed standard
    deviations before sampling and back-transformed exactly afterwards.
    Subjects with missing outcomes contribute through data augmentation;
    missing values of a modelled covariate get a companion normal model
    whose parameters are sampled jointly.  Deterministic given the seed.

    Raises ``ConvergenceError`` (with draws retained on the exception) if
    any split-Rhat exceeds 1.05 and `cfg.check_convergence` is set.
    """
    cfg = cfg or BayesIvConfig()
    model = _ReducedFormModel(ds, cfg)
    per_chain = (cfg.iterations - cfg.burnin + cfg.thin - 1) // cfg.thin
    streams = np.random.SeedSequence(cfg.seed).spawn(cfg.chains)
    chain_beta, chain_sigma, chain_acc = [], [], []
    for c in range(cfg.chains):
        beta, sigma, acc = _run_chain(model, streams[c], cfg.thin, per_chain)
        chain_beta.append(beta)
        chain_sigma.append(sigma)
        chain_acc.append(acc)

    kept = min(b.shape[0] for b in chain_beta)
    beta_chains = np.stack([b[:kept] for b in chain_beta])  # (chains, kept, p)
    sigma_chains = np.stack([s[:kept] for s in chain_sigma])

    # back-transform to the raw outcome scale
    scale_vec = np.ones(model.p)
    scale_vec[2:6] = [model.scales[1], model.scales[1], model.scales[2], model.scales[2]]
    for j in range(len(model.covariates)):
        scale_vec[7 + 3 * j] = model.scales[1]
        scale_vec[8 + 3 * j] = model.scales[2]
    beta_chains = beta_chains * scale_vec
    s_outer = np.outer(model.scales, model.scales)
    sigma_chains = sigma_chains * s_outer
    # undo the internal centring of assignment and covariates (exact per draw)
    b10 = beta_chains[:, :, 1]
    shifts = [
        b10 * model.zbar,
        beta_chains[:, :, 3] * b10 * model.zbar,
        beta_chains[:, :, 5] * b10 * model.zbar,
    ]
    for j, name in enumerate(model.covariates):
        for eq in range(3):
            shifts[eq] = shifts[eq] + beta_chains[:, :, 6 + 3 * j + eq] * model.xbar[name]
    for eq, col in enumerate((0, 2, 4)):
        beta_chains[:, :, col] -= shifts[eq]

    rhat = {}
    ess = {}
    for j, name in enumerate(model.names):
        rhat[name] = _split_rhat(beta_chains[:, :, j])
        ess[name] = _ess(beta_chains[:, :, j])
    acceptance = {
        name: float(np.mean([a[j] for a in chain_acc])) for j, name in enumerate(model.names)
    }
    draws = PosteriorDraws(
        beta=beta_chains.reshape(-1, model.p),
        sigma=sigma_chains.reshape(-1, 3, 3),
        names=model.names,
        chains=cfg.chains,
        per_chain=kept,
        acceptance=acceptance,
        rhat=rhat,
        ess=ess,
        meta={
            "outcome_scales": (float(model.scales[1]), float(model.scales[2])),
            "prior_sd": cfg.prior_sd,
            "wishart_df": cfg.wishart_df,
            "wishart_scale": "identity" if cfg.wishart_scale is None else [list(r) for r in cfg.wishart_scale],
            "seed": cfg.seed,
            "covariates": list(cfg.covariates),
        },
    )
    if cfg.check_convergence:
        worst = draws.max_rhat()
        if not np.isfinite(worst) or worst > RHAT_LIMIT:
            raise ConvergenceError(
                f"MCMC did not converge: max split-Rhat {worst:.4f} > {RHAT_LIMIT}", draws=draws
            )
    return draws


def summarize_posterior(draws: PosteriorDraws, lam: float):
    """Posterior medians and equal-tailed 95% credible intervals for the
    incremental cost, incremental QALY and INB at the given threshold."""
    from .cea import CeaResult

    cost, qaly = draws.effect_draws()
    if cost.size == 0:
        raise ValidationError("no posterior draws to summarise")
    inb_draws = lam * qaly - cost
    pairs = np.column_stack([cost, qaly])
    cov = np.cov(pairs.T) if cost.size > 1 else np.zeros((2, 2))
    lo, hi = np.quantile(inb_draws, [0.025, 0.975])
    return CeaResult(
        inc_cost=float(np.median(cost)),
        inc_qaly=float(np.median(qaly)),
        cov=cov,
        lam=float(lam),
        inb=float(np.median(inb_draws)),
        inb_se=float(inb_draws.std(ddof=1)) if inb_draws.size > 1 else 0.0,
        ci=(float(lo), float(hi)),
        estimand="CACE",
        method="bayes",
        extras={
            "cost_ci": tuple(float(q) for q in np.quantile(cost, [0.025, 0.975])),
            "qaly_ci": tuple(float(q) for q in np.quantile(qaly, [0.025, 0.975])),
            "n_draws": int(cost.size),
        },
    )

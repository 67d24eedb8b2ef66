"""Trial data-generating processes with known ground truth.

Subjects belong to latent compliance classes (never-taker, complier,
always-taker; defiers excluded by construction) determined by thresholding
a logistic transform of a prognosis score correlated with the unobserved
confounder, so departures from assignment are prognosis-driven.  Outcomes
are bivariate normal around stratum/confounder/baseline-dependent means;
assignment enters outcomes only through receipt.  A configurable
missingness stage removes cells under MCAR, covariate-dependent, MAR or
MNAR mechanisms with a monotone observation cascade.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit, ndtri

from .data import BASELINE_UTILITY, TrialDataset
from .exceptions import ValidationError

NEVER_TAKER = 0
COMPLIER = 1
ALWAYS_TAKER = 2
STRATUM_NAMES = {NEVER_TAKER: "never-taker", COMPLIER: "complier", ALWAYS_TAKER: "always-taker"}

MECHANISMS = ("MCAR", "CDM", "MAR", "MNAR")
INDICATOR_VARS = {"r0": BASELINE_UTILITY, "r1": "y1", "r2": "y2"}


@dataclass(frozen=True)
class MissingnessConfig:
    """Logistic models for the probability each cell is MISSING.

    `models` maps an observation indicator (r0 for baseline utility, r1 for
    cost, r2 for QALYs) to a linear predictor {variable: coefficient} with
    an optional "const" intercept.  Indicators are drawn along `order`; once
    a subject goes missing at one stage, all later stages are missing too,
    so the realised pattern is monotone in `order` by construction.

    The mechanism label restricts which predictors a model may use:
    MCAR only the intercept; CDM assignment, receipt and baseline
    covariates; MAR additionally any variable observed earlier in `order`;
    MNAR anything, including the variable itself.
    """

    mechanism: str
    models: dict[str, dict[str, float]] = field(default_factory=dict)
    order: tuple[str, ...] = ("r0", "r1", "r2")

    def __post_init__(self):
        if self.mechanism not in MECHANISMS:
            raise ValidationError(f"unknown missingness mechanism {self.mechanism!r}")
        if sorted(self.order) != sorted(INDICATOR_VARS):
            raise ValidationError(f"order must be a permutation of {tuple(INDICATOR_VARS)}")
        for indicator in self.models:
            if indicator not in INDICATOR_VARS:
                raise ValidationError(f"unknown indicator {indicator!r}")


@dataclass(frozen=True)
class DgpConfig:
    """Full specification of a simulated trial."""

    n: int
    p_complier: float
    p_never: float
    p_always: float
    effect_cost: float
    effect_qaly: float
    base_cost: float = 4000.0
    base_qaly: float = 3.0
    u_sd: float = 1.0
    u_coef_cost: float = 0.0
    u_coef_qaly: float = 0.0
    compliance_confounding: float = 0.0
    eq5d0_mean: float = 0.7
    eq5d0_sd: float = 0.2
    eq5d0_coef_cost: float = 0.0
    eq5d0_coef_qaly: float = 0.0
    resid_sd_cost: float = 1500.0
    resid_sd_qaly: float = 0.25
    resid_corr: float = 0.0
    extra_covariates: dict[str, tuple[float, float]] = field(default_factory=dict)
    missing: MissingnessConfig | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValidationError("n must be at least 1")
        probs = (self.p_complier, self.p_never, self.p_always)
        if any(p < 0 for p in probs):
            raise ValidationError("stratum probabilities must be nonnegative")
        if abs(sum(probs) - 1.0) > 1e-9:
            raise ValidationError(
                "stratum probabilities must sum to 1 (defier probability is fixed at 0)"
            )
        if not -1.0 < self.resid_corr < 1.0:
            raise ValidationError("|resid_corr| must be < 1")
        if not 0.0 <= self.compliance_confounding <= 1.0:
            raise ValidationError("compliance_confounding must lie in [0, 1]")


@dataclass(frozen=True)
class DgpTruth:
    """Latent ground truth recorded alongside a generated dataset."""

    stratum: np.ndarray
    d_z0: np.ndarray
    d_z1: np.ndarray
    y1_pot: np.ndarray  # (n, 2): potential cost under d=0, d=1
    y2_pot: np.ndarray
    cace: tuple[float, float]
    itt: tuple[float, float]
    compliance_diff: float


def population_truth(cfg: DgpConfig) -> dict:
    """Population-level estimands implied by a configuration."""
    return {
        "cace": (cfg.effect_cost, cfg.effect_qaly),
        "itt": (cfg.p_complier * cfg.effect_cost, cfg.p_complier * cfg.effect_qaly),
        "compliance_diff": cfg.p_complier,
    }


def _rng_streams(seed):
    root = np.random.SeedSequence(seed)
    children = root.spawn(2)
    return np.random.default_rng(children[0]), np.random.default_rng(children[1])


def generate_trial(cfg: DgpConfig) -> tuple[TrialDataset, DgpTruth]:
    """Draw a complete trial and its ground truth; deterministic given cfg."""
    rng, _ = _rng_streams(cfg.seed)
    n = cfg.n
    z = (rng.random(n) < 0.5).astype(np.int8)
    u = rng.normal(0.0, cfg.u_sd, size=n)

    # prognosis score: logistic transform of a latent correlated with U;
    # thresholds at the latent's quantiles give exact marginal stratum shares
    rho = cfg.compliance_confounding
    latent = rho * (u / cfg.u_sd) + np.sqrt(1.0 - rho**2) * rng.normal(size=n)
    score = expit(latent)
    t_always = expit(ndtri(cfg.p_always)) if cfg.p_always > 0 else 0.0
    t_never = expit(ndtri(cfg.p_always + cfg.p_complier)) if cfg.p_always + cfg.p_complier < 1 else 1.0
    stratum = np.full(n, COMPLIER, dtype=np.int8)
    stratum[score < t_always] = ALWAYS_TAKER
    if cfg.p_always + cfg.p_complier < 1:
        stratum[score >= t_never] = NEVER_TAKER

    d_z0 = (stratum == ALWAYS_TAKER).astype(np.int8)
    d_z1 = (stratum != NEVER_TAKER).astype(np.int8)
    d = np.where(z == 1, d_z1, d_z0).astype(np.int8)

    eq5d0 = rng.normal(cfg.eq5d0_mean, cfg.eq5d0_sd, size=n)
    eps = rng.multivariate_normal(
        [0.0, 0.0],
        [
            [cfg.resid_sd_cost**2, cfg.resid_corr * cfg.resid_sd_cost * cfg.resid_sd_qaly],
            [cfg.resid_corr * cfg.resid_sd_cost * cfg.resid_sd_qaly, cfg.resid_sd_qaly**2],
        ],
        size=n,
    )
    base1 = cfg.base_cost + cfg.u_coef_cost * u + cfg.eq5d0_coef_cost * eq5d0 + eps[:, 0]
    base2 = cfg.base_qaly + cfg.u_coef_qaly * u + cfg.eq5d0_coef_qaly * eq5d0 + eps[:, 1]
    y1_pot = np.column_stack([base1, base1 + cfg.effect_cost])
    y2_pot = np.column_stack([base2, base2 + cfg.effect_qaly])
    y1 = y1_pot[np.arange(n), d]
    y2 = y2_pot[np.arange(n), d]

    covariates = {BASELINE_UTILITY: eq5d0}
    for name, (mean, sd) in cfg.extra_covariates.items():
        covariates[name] = rng.normal(mean, sd, size=n)

    ds = TrialDataset(z=z, d=d, y1=y1, y2=y2, covariates=covariates)
    truth = DgpTruth(
        stratum=stratum,
        d_z0=d_z0,
        d_z1=d_z1,
        y1_pot=y1_pot,
        y2_pot=y2_pot,
        cace=(cfg.effect_cost, cfg.effect_qaly),
        itt=(cfg.p_complier * cfg.effect_cost, cfg.p_complier * cfg.effect_qaly),
        compliance_diff=cfg.p_complier,
    )
    return ds, truth


def _allowed_predictors(mechanism, order, position, ds):
    always = {"z", "d"} | set(ds.covariates)
    always.discard(BASELINE_UTILITY)  # itself subject to missingness via r0
    if mechanism == "MCAR":
        return set()
    if mechanism == "CDM":
        allowed = set(always)
        if "r0" in order[:position]:
            allowed.add(BASELINE_UTILITY)
        return allowed
    if mechanism == "MAR":
        allowed = set(always)
        for earlier in order[:position]:
            allowed.add(INDICATOR_VARS[earlier])
        return allowed
    return {"z", "d", "y1", "y2"} | set(ds.covariates)  # MNAR


def apply_missingness(ds: TrialDataset, cfg: DgpConfig) -> TrialDataset:
    """Remove cells per the configured mechanism; no-op when unconfigured."""
    if cfg.missing is None:
        return ds
    mc = cfg.missing
    _, rng = _rng_streams(cfg.seed)
    n = ds.n
    observed = {ind: np.ones(n, dtype=bool) for ind in INDICATOR_VARS}
    alive = np.ones(n, dtype=bool)  # still observed at the current cascade stage
    for position, indicator in enumerate(mc.order):
        model = mc.models.get(indicator)
        if model:
            allowed = _allowed_predictors(mc.mechanism, mc.order, position, ds)
            eta = np.full(n, model.get("const", 0.0))
            for var, coef in model.items():
                if var == "const":
                    continue
                if var not in allowed:
                    raise ValidationError(
                        f"{mc.mechanism} model for {indicator} may not depend on {var!r}"
                    )
                eta = eta + coef * ds.column(var)
            p_missing = expit(eta)
            if np.any(p_missing[alive] > 1.0 - 1e-8):
                warnings.warn(
                    f"missingness model for {indicator} implies observation probability ~0 "
                    "for some subjects"
                )
            miss = rng.random(n) < p_missing
        else:
            miss = np.zeros(n, dtype=bool)
        observed[indicator] = alive & ~miss
        alive = observed[indicator]

    y1 = ds.y1.copy()
    y2 = ds.y2.copy()
    y1[~observed["r1"]] = np.nan
    y2[~observed["r2"]] = np.nan
    covs = dict(ds.covariates)
    if BASELINE_UTILITY in covs:
        eq = covs[BASELINE_UTILITY].copy()
        eq[~observed["r0"]] = np.nan
        covs[BASELINE_UTILITY] = eq
    return ds.with_values(y1=y1, y2=y2, covariates=covs)


def reference_dgp(n: int = 2000, seed: int = 0, **overrides) -> DgpConfig:
    """Confounded-switching reference scenario.

    Sixty percent compliers; never-takers have the best prognosis (they
    refuse surgery and gain QALYs cheaply), always-takers the worst, so a
    per-protocol analysis understates both incremental effects and the net
    benefit.  True complier effects are +1000 cost and +0.1 QALYs with
    residual correlation 0.5.
    """
    cfg = DgpConfig(
        n=n,
        p_complier=0.60,
        p_never=0.25,
        p_always=0.15,
        effect_cost=1000.0,
        effect_qaly=0.1,
        base_cost=4000.0,
        base_qaly=3.0,
        u_sd=1.0,
        u_coef_cost=600.0,
        u_coef_qaly=0.15,
        compliance_confounding=0.8,
        eq5d0_mean=0.7,
        eq5d0_sd=0.2,
        eq5d0_coef_cost=-2000.0,
        eq5d0_coef_qaly=1.5,
        resid_sd_cost=1500.0,
        resid_sd_qaly=0.25,
        resid_corr=0.5,
        extra_covariates={"age": (60.0, 10.0)},
        seed=seed,
    )
    return replace(cfg, **overrides) if overrides else cfg


def reference_mar_dgp(n: int = 2000, seed: int = 0, **overrides) -> DgpConfig:
    """Reference scenario plus MAR missingness in cost driven by QALYs.

    Only y1 goes missing; the probability is logistic in the (always
    observed) QALY outcome, calibrated to leave roughly 60% of subjects
    complete.  Complete-case analyses are biased here while correctly
    weighted or imputed analyses are not.  Compliance confounding is milder
    than in the fully confounded scenario so that a linear imputation model
    is close to correctly specified.
    """
    missing = MissingnessConfig(
        mechanism="MAR",
        models={"r1": {"const": -11.9, "y2": 2.8}},
        order=("r0", "r2", "r1"),
    )
    cfg = reference_dgp(n=n, seed=seed, missing=missing, compliance_confounding=0.4)
    return replace(cfg, **overrides) if overrides else cfg

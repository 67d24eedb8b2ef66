import numpy as np
import pytest

from trialcea.data import TrialDataset
from trialcea.exceptions import ImputationError, PositivityError, ValidationError
from trialcea.iv import itt_sur, three_sls
from trialcea.missing import (
    PomSpec,
    default_pom_spec,
    fit_pom,
    ipw_weights,
    mi_impute,
    pattern_mixture_offset,
    pool_cace,
    rubin_pool,
)
from trialcea.simulate import MissingnessConfig, apply_missingness, generate_trial, reference_dgp


def mar_on_y2(n=2000, seed=0, const=-7.0, slope=1.5):
    """Reference scenario with missingness only in QALYs, driven by cost."""
    cfg = reference_dgp(
        n=n,
        seed=seed,
        missing=MissingnessConfig(
            mechanism="MAR",
            models={"r2": {"const": const, "y1": slope / 1000.0}},
            order=("r0", "r1", "r2"),
        ),
    )
    ds, truth = generate_trial(cfg)
    return apply_missingness(ds, cfg), truth, cfg


class TestFitPom:
    def test_independent_missingness_gives_intercept_only(self):
        cfg = reference_dgp(
            n=4000,
            seed=51,
            missing=MissingnessConfig(
                mechanism="MCAR",
                models={"r1": {"const": -1.2}, "r2": {"const": -1.5}},
            ),
        )
        ds, _ = generate_trial(cfg)
        dsm = apply_missingness(ds, cfg)
        pom = fit_pom(dsm)
        for model in pom.models:
            assert model.kept == [], f"{model.indicator} kept {model.kept}"

    def test_recovers_baseline_dependence(self):
        # QALY observation driven only by baseline utility
        cfg = reference_dgp(
            n=5000,
            seed=53,
            missing=MissingnessConfig(
                mechanism="MAR", models={"r2": {"const": -4.5, "eq5d0": 5.0}}
            ),
        )
        ds, _ = generate_trial(cfg)
        dsm = apply_missingness(ds, cfg)
        pom = fit_pom(dsm)
        r2 = next(m for m in pom.models if m.indicator == "r2")
        assert "eq5d0" in r2.kept

    def test_dropout_style_structure(self):
        # baseline utility missing haphazardly; cost dropout driven by age,
        # arm, receipt and baseline utility; QALY dropout by baseline only
        cfg = reference_dgp(
            n=8000,
            seed=51,
            missing=MissingnessConfig(
                mechanism="MAR",
                models={
                    "r0": {"const": -2.6},
                    "r1": {"const": -4.0, "age": 0.035, "z": -0.7, "d": 0.8, "eq5d0": 2.2},
                    "r2": {"const": -4.2, "eq5d0": 3.6},
                },
            ),
        )
        ds, _ = generate_trial(cfg)
        dsm = apply_missingness(ds, cfg)
        pom = fit_pom(dsm)
        by_ind = {m.indicator: m for m in pom.models}
        assert by_ind["r0"].kept == []
        assert set(by_ind["r1"].kept) == {"age", "z", "d", "eq5d0"}
        assert set(by_ind["r2"].kept) == {"eq5d0"}

    def test_stage_without_missingness_is_constant_one(self, complete_trial):
        ds, _ = complete_trial
        pom = fit_pom(ds)
        assert all(m.constant_probability == 1.0 for m in pom.models)

    def test_candidate_ordering_validated(self):
        with pytest.raises(ValidationError):
            PomSpec(candidates={"r1": ["y2"]})  # y2 observed later than cost

    def test_stepwise_drops_worst_first(self):
        dsm, _, _ = mar_on_y2(seed=55)
        spec = default_pom_spec(dsm)
        pom = fit_pom(dsm, spec)
        r2 = next(m for m in pom.models if m.indicator == "r2")
        assert "y1" in r2.kept  # the true driver survives
        for name, p in r2.dropped:
            assert p >= spec.p_threshold


class TestIpwWeights:
    def test_complete_data_weights_all_one(self, complete_trial):
        ds, _ = complete_trial
        w = ipw_weights(ds, fit_pom(ds))
        assert np.all(w.weights == 1.0)
        est_w = three_sls(ds, covariates=["eq5d0"], weights=w)
        est = three_sls(ds, covariates=["eq5d0"])
        assert est_w.theta == pytest.approx(est.theta, rel=1e-12)

    def test_constant_probability_weights_do_not_move_estimate(self):
        # empty POM models: every complete case gets the same weight, and a
        # constant weight cannot change a least-squares solution
        cfg = reference_dgp(
            n=3000,
            seed=56,
            missing=MissingnessConfig(mechanism="MCAR", models={"r1": {"const": -1.0}}),
        )
        ds, _ = generate_trial(cfg)
        dsm = apply_missingness(ds, cfg)
        pom = fit_pom(dsm)
        w = ipw_weights(dsm, pom)
        complete = w.weights > 0
        values = np.unique(w.weights[complete])
        if values.size == 1:  # intercept-only model survived stepwise
            est_w = three_sls(dsm, covariates=["eq5d0"], weights=w)
            est = three_sls(dsm, covariates=["eq5d0"])
            assert est_w.theta == pytest.approx(est.theta, rel=1e-10)

    def test_incomplete_cases_get_zero(self):
        dsm, _, _ = mar_on_y2(seed=57)
        w = ipw_weights(dsm, fit_pom(dsm))
        incomplete = np.isnan(dsm.y2)
        assert np.all(w.weights[incomplete] == 0.0)
        assert np.all(w.weights[~incomplete] > 0.0)

    def test_truncation_caps_weights(self):
        dsm, _, _ = mar_on_y2(seed=58, const=-9.0, slope=2.2)
        pom = fit_pom(dsm)
        raw = ipw_weights(dsm, pom)
        capped = ipw_weights(dsm, pom, truncation_quantile=0.9)
        assert capped.weights.max() < raw.weights.max()
        assert capped.diagnostics["truncated"] > 0

    def test_no_complete_cases_raises(self):
        ds = TrialDataset(
            z=[0, 1], d=[0, 1], y1=[np.nan, np.nan], y2=[1.0, 2.0]
        )
        with pytest.raises(PositivityError):
            ipw_weights(ds, fit_pom(ds))

    def test_noise_covariate_in_pom_barely_moves_estimate(self):
        # a regressor with zero true coefficient perturbs the weights only
        # through estimation noise in the refit
        dsm, _, _ = mar_on_y2(n=20_000, seed=64)
        order = ("r0", "r1", "r2")
        lean = PomSpec(candidates={"r2": ["y1"]}, p_threshold=1.0, order=order)
        padded = PomSpec(candidates={"r2": ["y1", "age"]}, p_threshold=1.0, order=order)
        est_lean = three_sls(dsm, covariates=["eq5d0"], weights=ipw_weights(dsm, fit_pom(dsm, lean)))
        est_padded = three_sls(
            dsm, covariates=["eq5d0"], weights=ipw_weights(dsm, fit_pom(dsm, padded))
        )
        for i in range(2):
            se = np.sqrt(est_lean.cov[i, i])
            assert abs(est_padded.theta[i] - est_lean.theta[i]) < 0.2 * se


class TestMiImpute:
    def test_no_missing_gives_identical_copies(self, complete_trial):
        ds, _ = complete_trial
        imp = mi_impute(ds, m=3, seed=1)
        assert imp.m == 3
        for d in imp.datasets:
            assert np.array_equal(d.y1, ds.y1)
            assert np.array_equal(d.y2, ds.y2)

    def test_observed_cells_untouched_and_donors_observed(self):
        dsm, _, _ = mar_on_y2(seed=59)
        imp = mi_impute(dsm, m=4, k=5, cycles=3, seed=2)
        miss = np.isnan(dsm.y2)
        for d in imp.datasets:
            assert np.array_equal(d.y2[~miss], dsm.y2[~miss])
            assert not np.isnan(d.y2).any()
            for arm in (0, 1):
                arm_rows = dsm.z == arm
                observed_values = set(dsm.y2[arm_rows & ~miss].tolist())
                imputed_values = d.y2[arm_rows & miss]
                assert all(v in observed_values for v in imputed_values.tolist())

    def test_deterministic_given_seed(self):
        dsm, _, _ = mar_on_y2(seed=60)
        a = mi_impute(dsm, m=2, cycles=2, seed=9)
        b = mi_impute(dsm, m=2, cycles=2, seed=9)
        for da, db in zip(a.datasets, b.datasets):
            assert np.array_equal(da.y2, db.y2)
        c = mi_impute(dsm, m=2, cycles=2, seed=10)
        assert not np.array_equal(a.datasets[0].y2, c.datasets[0].y2)

    def test_multiple_incomplete_variables(self):
        cfg = reference_dgp(
            n=3000,
            seed=61,
            missing=MissingnessConfig(
                mechanism="MAR",
                models={
                    "r0": {"const": -2.2},
                    "r1": {"const": -2.0, "age": 0.015},
                    "r2": {"const": -2.0, "eq5d0": 1.0},
                },
            ),
        )
        ds, _ = generate_trial(cfg)
        dsm = apply_missingness(ds, cfg)
        imp = mi_impute(dsm, m=3, k=5, cycles=3, seed=3)
        for d in imp.datasets:
            assert not np.isnan(d.y1).any()
            assert not np.isnan(d.y2).any()
            assert not np.isnan(d.covariates["eq5d0"]).any()

    def test_too_few_donors_raises(self):
        n = 20
        y1 = np.full(n, np.nan)
        y1[:3] = [10.0, 11.0, 12.0]  # three donors only
        ds = TrialDataset(
            z=np.zeros(n),
            d=np.zeros(n),
            y1=y1,
            y2=np.linspace(0, 1, n),
        )
        with pytest.raises(ImputationError, match="donor"):
            mi_impute(ds, m=1, k=5, cycles=1, seed=0)


class TestRubinPool:
    def test_two_imputation_hand_case(self):
        pooled = rubin_pool([[1.0], [3.0]], [[[1.0]], [[1.0]]])
        assert pooled.estimate[0] == pytest.approx(2.0)
        assert pooled.within[0, 0] == pytest.approx(1.0)
        assert pooled.between[0, 0] == pytest.approx(2.0)
        assert pooled.total[0, 0] == pytest.approx(4.0)

    def test_identical_estimates_no_between_variance(self):
        pooled = rubin_pool([[5.0, 1.0]] * 4, [np.eye(2)] * 4)
        assert pooled.between == pytest.approx(np.zeros((2, 2)))
        assert pooled.total == pytest.approx(pooled.within)
        assert np.isinf(pooled.df).all()

    def test_total_identity(self):
        rng = np.random.default_rng(70)
        m = 12
        ests = [rng.normal(size=3) for _ in range(m)]
        covs = []
        for _ in range(m):
            a = rng.normal(size=(3, 3))
            covs.append(a @ a.T)
        pooled = rubin_pool(ests, covs)
        expected = pooled.within + (1 + 1 / m) * pooled.between
        assert pooled.total == pytest.approx(expected, rel=1e-14)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(71)
        ests = [rng.normal(size=2) for _ in range(6)]
        covs = [np.eye(2) * (i + 1) for i in range(6)]
        a = rubin_pool(ests, covs)
        order = [3, 0, 5, 1, 4, 2]
        b = rubin_pool([ests[i] for i in order], [covs[i] for i in order])
        assert a.estimate == pytest.approx(b.estimate, rel=1e-14)
        assert a.total == pytest.approx(b.total, rel=1e-12)

    def test_single_imputation_rejected(self):
        with pytest.raises(ValidationError):
            rubin_pool([[1.0]], [[[1.0]]])


class TestPatternMixtureOffset:
    def setup_imputation(self, seed=62):
        dsm, truth, cfg = mar_on_y2(seed=seed)
        imp = mi_impute(dsm, m=5, k=5, cycles=2, seed=4)
        return dsm, imp

    def test_zero_delta_identity(self):
        _, imp = self.setup_imputation()
        shifted = pattern_mixture_offset(imp, {"y2": {0: 0.0, 1: 0.0}})
        for a, b in zip(imp.datasets, shifted.datasets):
            assert np.array_equal(a.y2, b.y2)

    def test_only_imputed_cells_move(self):
        dsm, imp = self.setup_imputation()
        delta = -0.05
        shifted = pattern_mixture_offset(imp, {"y2": {1: delta}})
        mask = imp.imputed["y2"]
        for a, b in zip(imp.datasets, shifted.datasets):
            moved = (dsm.z == 1) & mask
            assert b.y2[moved] == pytest.approx(a.y2[moved] + delta, abs=1e-14)
            assert np.array_equal(b.y2[~moved], a.y2[~moved])

    def test_pooled_shift_equals_delta_times_imputed_fraction(self):
        dsm, imp = self.setup_imputation()
        delta = -0.05
        shifted = pattern_mixture_offset(imp, {"y2": {1: delta}})
        base = pool_cace([itt_sur(d, covariates=[]) for d in imp.datasets])
        moved = pool_cace([itt_sur(d, covariates=[]) for d in shifted.datasets])
        arm1 = dsm.z == 1
        frac = (imp.imputed["y2"] & arm1).sum() / arm1.sum()
        observed_shift = moved.theta[1] - base.theta[1]
        assert observed_shift == pytest.approx(delta * frac, abs=1e-10)

    def test_matches_manual_recomputation(self):
        dsm, imp = self.setup_imputation()
        deltas = {"y2": {0: 0.02, 1: -0.07}}
        shifted = pattern_mixture_offset(imp, deltas)
        mask = imp.imputed["y2"]
        for a, b in zip(imp.datasets, shifted.datasets):
            manual = a.y2.copy()
            manual[mask & (dsm.z == 0)] += 0.02
            manual[mask & (dsm.z == 1)] += -0.07
            assert np.array_equal(b.y2, manual)

    def test_inb_monotone_in_treatment_arm_qaly_delta(self):
        from trialcea.cea import inb

        _, imp = self.setup_imputation()
        lam = 20_000.0
        inbs = []
        for delta in (-0.1, -0.05, 0.0, 0.05, 0.1):
            shifted = pattern_mixture_offset(imp, {"y2": {1: delta}})
            pooled = pool_cace([three_sls(d, covariates=["eq5d0"]) for d in shifted.datasets])
            inbs.append(inb(pooled, lam).inb)
        assert all(b > a for a, b in zip(inbs, inbs[1:]))

    def test_unimputed_variable_warns(self):
        _, imp = self.setup_imputation()
        with pytest.warns(UserWarning, match="no cells were imputed"):
            pattern_mixture_offset(imp, {"y1": {1: 100.0}})

    def test_unknown_variable_rejected(self):
        _, imp = self.setup_imputation()
        with pytest.raises(ValidationError):
            pattern_mixture_offset(imp, {"nope": {1: 1.0}})

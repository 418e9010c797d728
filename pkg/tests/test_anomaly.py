"""Scoring, trimming, conformalized p-values, and the FDR procedures."""

import math

import numpy as np
import pytest

from safegrid.anomaly import (GaussianScorer, PValueField, bh_procedure,
                              by_procedure, conformal_pvalue, detect_step,
                              empirical_fdr, fit_scorer, harmonic_number,
                              normalize_residuals, trim_calibration)


class TestNormalizeResiduals:
    def test_zero_residual(self):
        assert normalize_residuals(2.0, 2.0, 1.0) == 0.0

    def test_hand_computed(self):
        z = normalize_residuals(3.0, 1.0, 1.0)
        assert z == pytest.approx(1.999998, abs=1e-6)

    def test_floor_behavior(self):
        assert normalize_residuals(1.0, 0.0, 0.0) == pytest.approx(1e6)

    def test_negative_sigma_rejected(self):
        with pytest.raises(ValueError):
            normalize_residuals(1.0, 0.0, -1.0)


class TestScorers:
    def test_gaussian_score_at_center(self):
        rng = np.random.default_rng(0)
        scorer = fit_scorer(rng.standard_normal(200_000))
        assert scorer.score(scorer.mean) == pytest.approx(
            0.5 * math.log(2 * math.pi), abs=0.01)

    def test_gaussian_monotone_in_distance(self):
        scorer = GaussianScorer(mean=0.0, var=1.0)
        z = np.linspace(0, 5, 40)
        assert np.all(np.diff(scorer.score(z)) > 0)
        assert np.all(np.diff(scorer.score(-z)) > 0)

    def test_kernel_density_integrates_to_one(self):
        rng = np.random.default_rng(1)
        scorer = fit_scorer(rng.standard_normal(500), kind="kernel_density")
        grid = np.linspace(-8, 8, 4001)
        density = np.exp(-scorer.score(grid))
        assert np.trapezoid(density, grid) == pytest.approx(1.0, abs=1e-3)

    def test_kernel_degenerate_rejected(self):
        with pytest.raises(ValueError, match="zero-variance"):
            fit_scorer(np.zeros(100), kind="kernel_density")

    def test_gaussian_variance_floor(self):
        scorer = fit_scorer(np.zeros(100), kind="gaussian_nll")
        assert np.isfinite(scorer.score(1.0))

    def test_minimum_sample_size(self):
        with pytest.raises(ValueError, match="at least"):
            fit_scorer(np.ones(10))


class TestTrimming:
    def test_identity_at_zero(self):
        scores = np.random.default_rng(2).exponential(size=50)
        trimmed = trim_calibration(scores, 0.0)
        assert np.array_equal(trimmed.retained, np.sort(scores))

    def test_hand_count(self):
        trimmed = trim_calibration(np.arange(1.0, 101.0), 0.02)
        assert trimmed.n_retained == 98
        assert trimmed.retained.max() == 98.0

    def test_size_invariant(self):
        rng = np.random.default_rng(3)
        for n in (53, 100, 999):
            scores = rng.normal(size=n)
            trimmed = trim_calibration(scores, 0.02)
            assert trimmed.n_retained == math.ceil(0.98 * n)

    def test_all_identical_warns_and_keeps(self):
        with pytest.warns(UserWarning, match="retaining"):
            trimmed = trim_calibration(np.full(40, 7.0), 0.1)
        assert trimmed.n_retained == 40

    def test_bad_fraction_rejected(self):
        with pytest.raises(ValueError):
            trim_calibration(np.ones(10), 0.5)


class TestConformalPValue:
    def test_top_rank(self):
        trimmed = trim_calibration(np.arange(1.0, 100.0), 0.0)
        assert conformal_pvalue(trimmed, 1e9) == pytest.approx(1.0 / 100.0)

    def test_bottom_rank(self):
        trimmed = trim_calibration(np.arange(1.0, 100.0), 0.0)
        assert conformal_pvalue(trimmed, -1e9) == 1.0

    def test_hand_count(self):
        trimmed = trim_calibration(np.array([1.0, 2.0, 3.0, 4.0]), 0.0)
        assert conformal_pvalue(trimmed, 2.5) == pytest.approx(0.6)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(4)
        cal = rng.normal(size=150)
        tests = rng.normal(size=64)
        base = conformal_pvalue(trim_calibration(cal, 0.02), tests)
        for transform in (np.exp, lambda s: s**3, lambda s: 2.0 * s + 5.0):
            mapped = conformal_pvalue(trim_calibration(transform(cal), 0.02),
                                      transform(tests))
            assert np.array_equal(base, mapped)

    def test_super_uniform_small_scale(self):
        # smaller-scale version of the acceptance criterion
        rng = np.random.default_rng(5)
        n_draws = 20_000
        draws = rng.standard_normal((n_draws, 200))
        cal = np.sort(draws[:, :199], axis=1)
        tests = draws[:, 199]
        below = (cal >= tests[:, None]).sum(axis=1)
        p = (1.0 + below) / 200.0
        for alpha in (0.05, 0.1, 0.2):
            mc_se = math.sqrt(alpha * (1 - alpha) / n_draws)
            assert (p <= alpha).mean() <= alpha + 1.0 / 200.0 + 3.0 * mc_se


class TestProcedures:
    def test_bh_hand_example(self):
        res = bh_procedure([0.001, 0.02, 0.3, 0.9], 0.05)
        assert res.k_star == 2
        assert res.reject.sum() == 2
        assert res.reject[0] and res.reject[1]

    def test_bh_all_ones_empty(self):
        assert bh_procedure(np.ones(7), 0.05).reject.sum() == 0

    def test_bh_all_zero_rejects_all(self):
        assert bh_procedure(np.zeros(7), 0.05).reject.all()

    def test_by_hand_example(self):
        res = by_procedure([0.001, 0.02, 0.3, 0.9], 0.05)
        assert res.c_m == pytest.approx(25.0 / 12.0)
        assert res.k_star == 1
        assert res.reject.tolist() == [True, False, False, False]

    def test_by_harmonic_reference(self):
        assert harmonic_number(293) == pytest.approx(6.2591, abs=2e-4)
        assert harmonic_number(4) == pytest.approx(25.0 / 12.0)

    def test_by_subset_of_bh(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            p = rng.uniform(size=int(rng.integers(5, 200))) ** 2
            by = by_procedure(p, 0.1).reject
            bh = bh_procedure(p, 0.1).reject
            assert np.all(bh[by])  # every BY rejection also rejected by BH

    def test_invalid_pvalues_rejected(self):
        with pytest.raises(ValueError):
            bh_procedure([0.5, 1.2], 0.05)


class TestEmpiricalFdr:
    def test_no_rejections(self):
        fdr, power = empirical_fdr(np.zeros(10, dtype=bool), np.ones(10, dtype=bool))
        assert fdr == 0.0
        assert power == 0.0

    def test_half_false(self):
        reject = np.array([True, True, False])
        truth = np.array([True, False, False])
        fdr, power = empirical_fdr(reject, truth)
        assert fdr == pytest.approx(0.5)
        assert power == 1.0

    def test_perfect_detection(self):
        truth = np.array([True, False, True, False])
        fdr, power = empirical_fdr(truth.copy(), truth)
        assert fdr == 0.0
        assert power == 1.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            empirical_fdr(np.ones(3, dtype=bool), np.ones(4, dtype=bool))


class TestDetectStep:
    def test_field_consistency(self):
        rng = np.random.default_rng(7)
        p = rng.uniform(size=50) ** 3
        field = detect_step(p, 0.05, procedure="by")
        assert isinstance(field, PValueField)
        assert field.m == 50
        assert field.c_m == pytest.approx(harmonic_number(50))
        direct = by_procedure(p, 0.05)
        assert np.array_equal(field.reject, direct.reject)

    def test_unknown_procedure(self):
        with pytest.raises(ValueError):
            detect_step(np.ones(3), 0.05, procedure="holm")

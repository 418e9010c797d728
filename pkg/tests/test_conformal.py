"""Clustered split-conformal machinery: quantiles, intervals, ACI, coverage."""

import numpy as np
import pytest

from safegrid.conformal import (CalibrationLedger, ClusterAssignment,
                                ForecastBundle, aci_update, build_intervals,
                                cluster_nodes, cluster_quantile,
                                conformity_scores, error_statistics,
                                evaluate_coverage)


class TestClusterNodes:
    def test_k_one_degenerate(self):
        stats = np.random.default_rng(0).normal(size=(20, 3))
        assignment = cluster_nodes(stats, 1, seed=0)
        assert np.all(assignment.labels == 0)
        assert np.allclose(assignment.centroids[0], stats.mean(axis=0))

    def test_separated_clouds_recovered(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(30, 3)) * 0.05
        b = rng.normal(size=(30, 3)) * 0.05 + 10.0
        assignment = cluster_nodes(np.vstack([a, b]), 2, seed=3)
        first, second = assignment.labels[:30], assignment.labels[30:]
        assert len(set(first.tolist())) == 1
        assert len(set(second.tolist())) == 1
        assert first[0] != second[0]

    def test_deterministic_given_seed(self):
        stats = np.random.default_rng(2).normal(size=(40, 3))
        a = cluster_nodes(stats, 5, seed=11)
        b = cluster_nodes(stats, 5, seed=11)
        assert np.array_equal(a.labels, b.labels)

    def test_every_cluster_nonempty(self):
        # identical points force empty-cluster repair
        stats = np.zeros((10, 3))
        stats[0] = (5.0, 5.0, 5.0)
        assignment = cluster_nodes(stats, 3, seed=0)
        assert len(np.unique(assignment.labels)) == 3

    def test_invalid_k_rejected(self):
        with pytest.raises(ValueError):
            cluster_nodes(np.zeros((5, 3)), 0, seed=0)
        with pytest.raises(ValueError):
            cluster_nodes(np.zeros((5, 3)), 6, seed=0)


class TestScoresAndQuantiles:
    def test_exact_prediction_scores_zero(self):
        assert np.all(conformity_scores(np.ones(5), np.ones(5), np.ones(5)) == 0)

    def test_hand_computed_score(self):
        assert conformity_scores(10.0, 7.0, 2.0) == pytest.approx(1.5)

    def test_scale_invariance(self):
        rng = np.random.default_rng(3)
        y, mu = rng.normal(size=(2, 50))
        sigma = rng.uniform(0.5, 2.0, size=50)
        base = conformity_scores(y, mu, sigma)
        scaled = conformity_scores(3.0 * y, 3.0 * mu, 3.0 * sigma)
        np.testing.assert_allclose(scaled, base, rtol=1e-12)

    def test_nonpositive_sigma_rejected(self):
        with pytest.raises(ValueError):
            conformity_scores(1.0, 0.0, 0.0)

    def test_quantile_hand_count(self):
        assert cluster_quantile(np.arange(1.0, 20.0), 0.1) == 18.0

    def test_quantile_sentinel(self):
        assert cluster_quantile(np.array([3.0]), 0.1) == np.inf

    def test_constant_scores(self):
        assert cluster_quantile(np.full(100, 2.5), 0.2) == 2.5

    def test_monotone_in_alpha(self):
        scores = np.random.default_rng(4).exponential(size=200)
        alphas = np.linspace(0.4, 0.02, 12)
        qs = [cluster_quantile(scores, a) for a in alphas]
        assert np.all(np.diff(qs) >= 0)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            cluster_quantile(np.array([]), 0.1)


def one_cluster_ledger(scores, alpha=0.1, **kwargs):
    clusters = ClusterAssignment(k=1, labels=np.zeros(len(scores), dtype=int),
                                 centroids=np.zeros((1, 3)))
    return CalibrationLedger(clusters, [np.asarray(scores)], target_alpha=alpha,
                             **kwargs)


class TestIntervals:
    def test_degenerate_quantile(self):
        ledger = one_cluster_ledger(np.zeros(99))
        bundle = ForecastBundle(mu=np.full(99, 5.0), sigma=np.ones(99),
                                clusters=np.zeros(99, dtype=int))
        ivs = build_intervals(bundle, ledger)
        assert np.all(ivs.lower == 5.0)
        assert np.all(ivs.upper == 5.0)

    def test_hand_computed_bounds(self):
        scores = np.full(199, 1.5)
        ledger = one_cluster_ledger(scores)
        bundle = ForecastBundle(mu=np.array([5.0]), sigma=np.array([2.0]),
                                clusters=np.array([0]))
        ivs = build_intervals(bundle, ledger)
        assert ivs.lower[0] == pytest.approx(2.0)
        assert ivs.upper[0] == pytest.approx(8.0)

    def test_infinite_sentinel_flagged(self):
        ledger = one_cluster_ledger(np.array([1.0]))  # n=1 -> +inf at alpha=0.1
        bundle = ForecastBundle(mu=np.zeros(1), sigma=np.ones(1),
                                clusters=np.zeros(1, dtype=int))
        ivs = build_intervals(bundle, ledger)
        assert ivs.unbounded[0]
        assert ivs.lower[0] == -np.inf

    def test_shift_equivariance(self):
        rng = np.random.default_rng(5)
        ledger = one_cluster_ledger(rng.exponential(size=150))
        mu = rng.normal(size=20)
        bundle = ForecastBundle(mu=mu, sigma=np.ones(20),
                                clusters=np.zeros(20, dtype=int))
        shifted = ForecastBundle(mu=mu + 3.5, sigma=np.ones(20),
                                 clusters=np.zeros(20, dtype=int))
        a = build_intervals(bundle, ledger)
        b = build_intervals(shifted, ledger)
        np.testing.assert_allclose(b.lower, a.lower + 3.5, rtol=1e-12)
        np.testing.assert_allclose(b.upper, a.upper + 3.5, rtol=1e-12)

    def test_missing_cluster_rejected(self):
        ledger = one_cluster_ledger(np.ones(50))
        bundle = ForecastBundle(mu=np.zeros(2), sigma=np.ones(2),
                                clusters=np.array([0, 1]))
        with pytest.raises(ValueError, match="cluster"):
            build_intervals(bundle, ledger)


class TestAci:
    def test_gamma_zero_identity(self):
        assert aci_update(0.1, 1.0, 0.0, 0.1) == 0.1

    def test_hand_computed_step(self):
        assert aci_update(0.1, 1.0, 0.05, 0.1) == pytest.approx(0.055)

    def test_clamped_to_range(self):
        assert aci_update(0.002, 1.0, 0.9, 0.1) == 0.001
        assert aci_update(0.998, 0.0, 0.9, 0.999) == 0.999

    def test_appendix_variant_flips_sign(self):
        main = aci_update(0.2, 1.0, 0.05, 0.1, variant="main")
        app = aci_update(0.2, 1.0, 0.05, 0.1, variant="appendix")
        assert main < 0.2 < app

    def test_long_run_tracking_under_shift(self):
        # variance doubles mid-stream; the adaptive level keeps long-run
        # miscoverage near the target
        rng = np.random.default_rng(6)
        n_cal, t_steps, alpha, gamma = 500, 10_000, 0.1, 0.05
        cal_scores = np.abs(rng.standard_normal(n_cal))
        alpha_t = alpha
        errs = np.empty(t_steps)
        for t in range(t_steps):
            scale = 1.0 if t < t_steps // 2 else np.sqrt(2.0)
            z = abs(rng.standard_normal()) * scale
            q = cluster_quantile(cal_scores, alpha_t)
            err = float(z > q)
            errs[t] = err
            alpha_t = aci_update(alpha_t, err, gamma, alpha)
        assert abs(errs.mean() - alpha) <= 0.02


class TestCoverageEvaluation:
    def test_fixture_arithmetic(self):
        # published-style row: coverage .914, RIW .43 -> efficiency 2.13
        from safegrid.conformal import PredictionIntervalSet
        ivs = PredictionIntervalSet(lower=np.zeros(1000), upper=np.full(1000, 0.43))
        y = np.linspace(0, 1, 1000)
        rep = evaluate_coverage(ivs, np.where(y < 0.914, 0.2, 2.0), 1.0)
        assert rep.riw == pytest.approx(0.43)
        assert rep.coverage == pytest.approx(0.914)
        assert rep.efficiency == pytest.approx(0.914 / 0.43, abs=1e-12)

    def test_all_inside_riw_half(self):
        from safegrid.conformal import PredictionIntervalSet
        ivs = PredictionIntervalSet(lower=np.zeros(10), upper=np.full(10, 0.5))
        rep = evaluate_coverage(ivs, np.full(10, 0.25), 1.0)
        assert rep.efficiency == pytest.approx(2.0)

    def test_degenerate_with_misses_rejected(self):
        from safegrid.conformal import PredictionIntervalSet
        ivs = PredictionIntervalSet(lower=np.zeros(4), upper=np.zeros(4))
        with pytest.raises(ValueError, match="undefined"):
            evaluate_coverage(ivs, np.array([0.0, 1.0, 0.0, 0.0]), 1.0)

    def test_zero_range_rejected(self):
        from safegrid.conformal import PredictionIntervalSet
        ivs = PredictionIntervalSet(lower=np.zeros(4), upper=np.ones(4))
        with pytest.raises(ValueError, match="range"):
            evaluate_coverage(ivs, np.zeros(4), 0.0)


class TestMarginalCoverage:
    def test_exchangeable_mean_coverage(self):
        # conformal guarantee on exchangeable data; single-run check here, the
        # full 20-seed version lives in the acceptance suite
        rng = np.random.default_rng(7)
        n_nodes, n_cal, n_test, alpha = 50, 500, 2000, 0.1
        sigma = rng.uniform(0.5, 2.0, size=n_nodes)
        cal_scores = np.abs(rng.standard_normal((n_cal, n_nodes)))
        stats = error_statistics(cal_scores[:100] * sigma)
        clusters = cluster_nodes(stats, 5, seed=0)
        by_cluster = [cal_scores[:, clusters.labels == k].ravel()
                      for k in range(clusters.k)]
        ledger = CalibrationLedger(clusters, by_cluster, target_alpha=alpha)
        mu = rng.normal(size=n_nodes)
        bundle = ForecastBundle(mu=mu, sigma=sigma, clusters=clusters.labels)
        ivs = build_intervals(bundle, ledger)
        y = mu + sigma * rng.standard_normal((n_test, n_nodes))
        inside = (y >= ivs.lower) & (y <= ivs.upper)
        assert 0.875 <= inside.mean() <= 0.935


class TestLedgerSerialization:
    def test_json_round_trip_bytes(self):
        rng = np.random.default_rng(8)
        ledger = one_cluster_ledger(rng.exponential(size=64))
        ledger.record_errors([1.0])
        text = ledger.to_json()
        again = CalibrationLedger.from_json(text).to_json()
        assert text == again

    def test_clone_isolates_aci_state(self):
        ledger = one_cluster_ledger(np.ones(64))
        clone = ledger.clone()
        clone.record_errors([1.0])
        assert ledger.alpha_t[0] == pytest.approx(0.1)
        assert clone.alpha_t[0] != pytest.approx(0.1)

"""PIT/KS and reliability diagnostics against Monte-Carlo oracles."""

import numpy as np
import pytest

from safegrid.diagnostics import pit_values, reliability_curve


class TestPit:
    def test_calibrated_data_passes_ks(self):
        # 99% KS critical value ~ 1.63 / sqrt(n)
        n = 10_000
        rng = np.random.default_rng(0)
        mu = rng.normal(size=n)
        sigma = rng.uniform(0.5, 2.0, size=n)
        y = mu + sigma * rng.standard_normal(n)
        _, ks = pit_values(mu, sigma, y)
        assert ks < 1.63 / np.sqrt(n)

    def test_calibrated_passes_across_seeds(self):
        n = 4000
        crit = 1.63 / np.sqrt(n)
        for seed in range(20):
            rng = np.random.default_rng(seed)
            mu = rng.normal(size=n)
            sigma = rng.uniform(0.5, 2.0, size=n)
            y = mu + sigma * rng.standard_normal(n)
            _, ks = pit_values(mu, sigma, y)
            assert ks < crit, f"seed {seed}: ks={ks:.4f}"

    def test_point_mass_at_half(self):
        mu = np.arange(10.0)
        pit, ks = pit_values(mu, np.ones(10), mu)
        assert np.allclose(pit, 0.5)
        assert ks == pytest.approx(0.5)

    def test_overdispersed_sigma_fails_ks(self):
        n = 10_000
        rng = np.random.default_rng(1)
        mu = np.zeros(n)
        y = rng.standard_normal(n)  # true sigma 1
        _, ks = pit_values(mu, np.full(n, 2.0), y)  # claimed sigma doubled
        assert ks > 1.63 / np.sqrt(n)

    def test_rejects_nonpositive_sigma(self):
        with pytest.raises(ValueError):
            pit_values(np.zeros(3), np.array([1.0, 0.0, 1.0]), np.zeros(3))


class TestReliability:
    def test_calibrated_error_small(self):
        n = 100_000
        rng = np.random.default_rng(2)
        mu = rng.normal(size=n)
        sigma = rng.uniform(0.5, 1.5, size=n)
        y = mu + sigma * rng.standard_normal(n)
        _, err = reliability_curve(mu, sigma, y, np.arange(0.1, 1.0, 0.1))
        assert err < 0.01

    def test_underdispersed_covers_less_everywhere(self):
        n = 20_000
        rng = np.random.default_rng(3)
        mu = np.zeros(n)
        y = rng.standard_normal(n)
        levels = np.arange(0.1, 1.0, 0.1)
        coverage, _ = reliability_curve(mu, np.full(n, 0.5), y, levels)
        assert np.all(coverage < levels)

    def test_zero_residuals_cover_fully(self):
        mu = np.linspace(0, 1, 50)
        coverage, err = reliability_curve(mu, np.ones(50), mu, [0.5, 0.9])
        assert np.allclose(coverage, 1.0)
        assert err == pytest.approx(0.3)  # |1-0.5| and |1-0.9| averaged

    def test_rejects_bad_levels(self):
        with pytest.raises(ValueError):
            reliability_curve(np.zeros(3), np.ones(3), np.zeros(3), [0.0, 0.5])

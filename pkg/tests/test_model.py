"""Tests for the Wiener model likelihoods and path simulation."""

import math

import numpy as np
import pytest
from scipy import stats

from tests.conftest import random_params, random_series
from trackdeg.errors import DecompositionError, EmptySeriesError, ModelSpecificationError
from trackdeg.model import (
    IndicatorVector,
    PostMaintenanceState,
    SegmentSeries,
    WienerParams,
    build_covariance,
    increments,
    loglik_multivariate,
    loglik_univariate,
    simulate_path,
)


class TestSegmentSeries:
    def test_rejects_duplicate_timestamps(self):
        with pytest.raises(ValueError, match="strictly increasing"):
            SegmentSeries(0, [0.0, 90.0, 90.0], np.ones((3, 2)))

    def test_first_flag_must_be_false(self):
        with pytest.raises(ValueError, match="maint_flags"):
            SegmentSeries(0, [0.0, 90.0], np.ones((2, 2)), [True, False])

    def test_single_indicator_observations_become_column(self):
        s = SegmentSeries(3, [0.0, 1.0, 2.0], [1.0, 2.0, 3.0])
        assert s.observations.shape == (3, 1)
        assert s.labels == ("z0",)

    def test_indicator_vector_rejects_non_finite(self):
        with pytest.raises(ValueError):
            IndicatorVector(np.array([1.0, np.nan]), ("a", "b"))

    def test_post_maintenance_values_positive(self):
        with pytest.raises(ValueError):
            PostMaintenanceState(0, 1, [1.0, 0.0])


class TestIncrements:
    def test_single_interval(self):
        s = SegmentSeries(0, [0.0, 90.0], [[1, 1, 1, 1], [2, 2, 2, 2]])
        (inc,) = increments(s)
        assert inc.dt == 90.0
        np.testing.assert_array_equal(inc.dz, [1, 1, 1, 1])
        assert inc.maint is False

    def test_constant_observations(self):
        s = SegmentSeries(0, [0.0, 90.0, 180.0], np.full((3, 4), 2.5))
        assert all(np.all(inc.dz == 0.0) for inc in increments(s))

    def test_matches_elementwise_differences(self, rng):
        s = random_series(3, rng, n_obs=10, maint=(4,))
        result = increments(s)
        assert len(result) == 9
        for j, inc in enumerate(result):
            assert inc.dt == s.times[j + 1] - s.times[j]
            assert inc.dt > 0
            for q in range(3):
                assert inc.dz[q] == s.observations[j + 1, q] - s.observations[j, q]
            assert inc.maint == (j + 1 == 4)

    def test_single_observation_is_empty(self):
        with pytest.raises(EmptySeriesError):
            increments(SegmentSeries(0, [0.0], [[1.0, 2.0]]))


class TestBuildCovariance:
    def test_identity(self):
        np.testing.assert_allclose(build_covariance([1, 1, 1, 1], np.eye(4)), np.eye(4))

    def test_two_by_two(self):
        sigma = build_covariance([2, 3], np.array([[1.0, 0.5], [0.5, 1.0]]))
        np.testing.assert_allclose(sigma, [[4.0, 3.0], [3.0, 9.0]])

    def test_random_matches_triple_product(self, rng):
        for _ in range(20):
            p = random_params(4, rng)
            d = np.diag(p.marginal_sd)
            sigma = build_covariance(p.marginal_sd, p.corr)
            np.testing.assert_allclose(sigma, d @ p.corr @ d, rtol=1e-12, atol=1e-14)
            np.testing.assert_array_equal(sigma, sigma.T)
            np.linalg.cholesky(sigma)
            np.testing.assert_allclose(np.diag(sigma), p.marginal_sd**2)

    def test_not_positive_definite(self):
        r = np.array([[1.0, 0.9, 0.9], [0.9, 1.0, -0.9], [0.9, -0.9, 1.0]])
        with pytest.raises(DecompositionError):
            build_covariance([1.0, 1.0, 1.0], r)

    def test_rejects_non_unit_diagonal(self):
        with pytest.raises(ValueError, match="unit diagonal"):
            build_covariance([1.0, 1.0], np.array([[2.0, 0.0], [0.0, 1.0]]))


def _reference_loglik(params, series, post_maint):
    """Interval by interval with scipy's multivariate normal."""
    sigma = params.covariance
    total = 0.0
    for k in range(1, series.n_obs):
        dt = series.times[k] - series.times[k - 1]
        if series.flags[k]:
            mean = post_maint[k] + params.drift * dt / 2
            total += stats.multivariate_normal.logpdf(series.observations[k], mean, sigma * dt / 2)
        else:
            dz = series.observations[k] - series.observations[k - 1]
            total += stats.multivariate_normal.logpdf(dz, params.drift * dt, sigma * dt)
    return total


class TestWienerParams:
    @pytest.mark.parametrize("sd", [[0.1, 0.0], [0.1, -0.2], [0.1, np.nan]])
    def test_rejects_non_positive_sd(self, sd):
        with pytest.raises(ValueError, match="marginal_sd"):
            WienerParams([0.01, 0.02], sd)

    def test_rejects_negative_drift(self):
        with pytest.raises(ValueError, match="drift"):
            WienerParams([-0.01], [0.1])

    def test_identity_correlation_by_default(self):
        np.testing.assert_array_equal(WienerParams([0.0, 0.1], [0.1, 0.2]).corr, np.eye(2))


class TestLoglikMultivariate:
    def test_standard_normal_at_origin(self):
        s = SegmentSeries(0, [0.0, 1.0], np.zeros((2, 4)))
        params = WienerParams(np.zeros(4), np.ones(4))
        assert loglik_multivariate(params, s) == pytest.approx(-2.0 * math.log(2 * math.pi), abs=1e-12)
        assert loglik_multivariate(params, s) == pytest.approx(-3.67575, abs=1e-5)

    def test_matches_term_by_term_reference(self, rng):
        for _ in range(50):
            q = int(rng.integers(1, 5))
            params = random_params(q, rng)
            s = random_series(q, rng, n_obs=8, maint=(3, 6))
            post = {k: rng.uniform(0.5, 2.0, q) for k in (3, 6)}
            assert loglik_multivariate(params, s, post) == pytest.approx(
                _reference_loglik(params, s, post), abs=1e-9
            )

    def test_without_maintenance_is_plain_increment_density(self, rng):
        for _ in range(50):
            params = random_params(4, rng)
            s = random_series(4, rng)
            assert loglik_multivariate(params, s) == pytest.approx(
                _reference_loglik(params, s, {}), abs=1e-10
            )

    def test_diagonal_sigma_is_sum_of_univariate(self, rng):
        for _ in range(50):
            params = random_params(4, rng, diagonal=True)
            s = random_series(4, rng, maint=(5,))
            post = {5: rng.uniform(0.5, 2.0, 4)}
            total = sum(
                loglik_univariate(params.drift[q], params.marginal_sd[q] ** 2, s, q, post)
                for q in range(4)
            )
            assert loglik_multivariate(params, s, post) == pytest.approx(total, abs=1e-9)

    def test_single_indicator_equals_univariate(self, rng):
        for _ in range(50):
            params = random_params(1, rng)
            s = random_series(1, rng, maint=(2,))
            post = {2: [1.3]}
            uni = loglik_univariate(params.drift[0], params.marginal_sd[0] ** 2, s, 0, post)
            assert loglik_multivariate(params, s, post) == pytest.approx(uni, abs=1e-10)

    def test_permutation_invariance(self, rng):
        for _ in range(20):
            params = random_params(4, rng)
            s = random_series(4, rng, maint=(7,))
            zp = rng.uniform(0.5, 2.0, 4)
            order = rng.permutation(4)
            before = loglik_multivariate(params, s, {7: zp})
            after = loglik_multivariate(params.permuted(order), s.select(order), {7: zp[order]})
            assert after == pytest.approx(before, abs=1e-10)

    def test_drift_maximized_at_least_squares_estimate(self, rng):
        params = random_params(2, rng)
        s = random_series(2, rng, n_obs=6)
        s = SegmentSeries(0, s.times, s.observations + 0.05 * s.times[:, None])
        best = np.diff(s.observations, axis=0).sum(axis=0) / (s.times[-1] - s.times[0])
        assert np.all(best > 0)

        def at(mu):
            return loglik_multivariate(WienerParams(mu, params.marginal_sd, params.corr), s)

        peak = at(best)
        for d0 in np.linspace(-0.8, 0.8, 9):
            for d1 in np.linspace(-0.8, 0.8, 9):
                mu = best * (1.0 + np.array([d0, d1]))
                assert at(mu) <= peak + 1e-12

    def test_missing_post_maintenance_state(self, rng):
        s = random_series(2, rng, maint=(3,))
        with pytest.raises(ModelSpecificationError, match="interval 3"):
            loglik_multivariate(random_params(2, rng), s, {})

    def test_indicator_count_mismatch(self, rng):
        with pytest.raises(ModelSpecificationError):
            loglik_multivariate(random_params(3, rng), random_series(2, rng))


class TestLoglikUnivariate:
    def test_standard_normal_at_origin(self):
        s = SegmentSeries(0, [0.0, 1.0], [[0.0], [0.0]])
        assert loglik_univariate(0.0, 1.0, s, 0) == pytest.approx(-0.91894, abs=1e-5)

    def test_maintenance_interval_at_its_mean(self):
        mu, var, dt, zplus = 0.1, 0.04, 10.0, 2.0
        s = SegmentSeries(0, [0.0, dt], [[5.0], [zplus + mu * dt / 2]], [False, True])
        value = loglik_univariate(mu, var, s, 0, {1: PostMaintenanceState(0, 1, [zplus])})
        assert value == pytest.approx(-0.5 * math.log(math.pi * var * dt), abs=1e-12)

    def test_matches_direct_formula(self, rng):
        for _ in range(50):
            mu, var = rng.uniform(0, 0.1), rng.uniform(0.01, 0.3)
            s = random_series(3, rng, maint=(4,))
            zp = rng.uniform(0.5, 2.0, 3)
            q = int(rng.integers(0, 3))
            z = s.observations[:, q]
            expected = 0.0
            for k in range(1, s.n_obs):
                dt = s.times[k] - s.times[k - 1]
                if k == 4:
                    expected += stats.norm.logpdf(z[k], zp[q] + mu * dt / 2, math.sqrt(var * dt / 2))
                else:
                    expected += stats.norm.logpdf(z[k] - z[k - 1], mu * dt, math.sqrt(var * dt))
            assert loglik_univariate(mu, var, s, q, {4: zp}) == pytest.approx(expected, abs=1e-9)

    def test_accepts_single_value_post_maintenance(self, rng):
        s = random_series(3, rng, maint=(4,))
        zp = np.array([1.0, 1.5, 2.0])
        full = loglik_univariate(0.02, 0.1, s, 1, {4: zp})
        single = loglik_univariate(0.02, 0.1, s, 1, {4: [1.5]})
        assert full == single

    def test_variance_must_be_positive(self, rng):
        with pytest.raises(ValueError):
            loglik_univariate(0.0, 0.0, random_series(1, rng), 0)


class TestSimulatePath:
    def test_drift_only_limit(self):
        params = WienerParams(np.ones(4), np.full(4, 1e-6))
        path = simulate_path(params, np.zeros(4), [0.0, 1.0], seed=0)
        np.testing.assert_allclose(path[1], np.ones(4), atol=1e-4)
        np.testing.assert_array_equal(path[0], np.zeros(4))

    def test_mean_at_one_day(self):
        params = WienerParams(np.full(4, 0.5), np.full(4, 0.3))
        paths = simulate_path(params, np.zeros(4), [0.0, 1.0], seed=11, n_paths=10_000)
        mean = paths[:, 1, :].mean(axis=0)
        se = 0.3 / math.sqrt(10_000)
        assert np.all(np.abs(mean - 0.5) < 3 * se)

    def test_increment_covariance(self, rng):
        params = random_params(4, rng)
        dt = 2.0
        paths = simulate_path(params, np.zeros(4), [0.0, dt], seed=5, n_paths=10_000)
        cov = np.cov(paths[:, 1, :] - paths[:, 0, :], rowvar=False)
        target = params.covariance * dt
        assert np.linalg.norm(cov - target) / np.linalg.norm(target) < 0.05

    def test_reset_at_interval_midpoint(self):
        params = WienerParams([0.2, 0.4], [1e-7, 1e-7])
        times = [0.0, 10.0, 20.0, 30.0]
        path = simulate_path(params, [5.0, 5.0], times, {2: np.array([1.0, 1.0])}, seed=1)
        np.testing.assert_allclose(path[1], [7.0, 9.0], atol=1e-5)
        np.testing.assert_allclose(path[2], [2.0, 3.0], atol=1e-5)
        np.testing.assert_allclose(path[3], [4.0, 7.0], atol=1e-5)

    def test_deterministic_for_seed(self, rng):
        params = random_params(3, rng)
        a = simulate_path(params, np.ones(3), np.arange(6.0), seed=42)
        b = simulate_path(params, np.ones(3), np.arange(6.0), seed=42)
        np.testing.assert_array_equal(a, b)

    def test_times_must_increase(self, rng):
        with pytest.raises(ValueError):
            simulate_path(random_params(2, rng), np.ones(2), [0.0, 2.0, 1.0], seed=0)

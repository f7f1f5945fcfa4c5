import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import batch_belief, fd_jacobian
from softmaxfit.bandit import (
    BanditEnv,
    UclParams,
    build_spatial_prior,
    belief_update,
    grid_locations,
    initial_belief,
    landscape_from_profile,
    run_episode,
    ucl_heuristic,
    unimodal_profile,
)
from softmaxfit.estimator import FitResult, check_identification
from softmaxfit.linearize import (
    LinearizationPoint,
    UclFeatureDataset,
    _estimate_from_fit,
    delta_bounds,
    exact_objective,
    fit_population,
    fit_ucl,
    linearization_coefficients,
    linearize_episode,
    linearized_objective,
    theta_from_ucl,
    ucl_from_theta,
)
from softmaxfit.model import read_dataset_csv, write_dataset_csv

LOCS = grid_locations()
ENV = BanditEnv(landscape_from_profile(unimodal_profile()), 0.1, LOCS, 100)
HIGH = UclParams(200.0, 1.0, 1.0, 4.0, 0.01)


def random_history(rng, n_arms, T):
    return rng.integers(0, n_arms, T), rng.normal(50, 20, T)


class TestParameterMap:
    @pytest.mark.parametrize("truth, point, expected", [
        ((4.0, 200.0, 1.0), (150.0, 2.0), (0.25, 12.5, 1.25e-3)),
        ((4.0, 200.0, 1.0), (250.0, 0.5), (0.25, -12.5, -2.5e-3)),
    ])
    def test_published_fixtures(self, truth, point, expected):
        nu, mu0, s0 = truth
        theta = theta_from_ucl(nu, mu0, s0, LinearizationPoint.from_prior(*point, 1.0))
        np.testing.assert_allclose(theta, expected, rtol=1e-12)

    def test_weak_prior_fixture(self):
        theta = theta_from_ucl(0.5, 30.0, 1e3, LinearizationPoint.from_prior(40.0, 950.0, 0.0))
        np.testing.assert_allclose(theta[:2], [2.0, -20.0], rtol=1e-12)
        # the fixture value carries three significant figures
        assert theta[2] == pytest.approx(-1.05e-6, rel=5e-3)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(1e-3, 1e3), st.floats(-1e3, 1e3), st.floats(-1e2, 1e2),
           st.floats(-1e3, 1e3), st.floats(1e-3, 1e3))
    def test_round_trip(self, t1, t2, t3, mu_bar, s_bar):
        point = LinearizationPoint.from_prior(mu_bar, s_bar, 1.0)
        theta = np.array([t1, t2, t3])
        nu, d_mu, d_delta = ucl_from_theta(theta, point)
        back = np.array([1 / nu, d_mu / nu, d_delta / nu])
        np.testing.assert_allclose(back, theta, rtol=1e-12, atol=1e-12 * abs(t1))

    def test_non_positive_theta1(self):
        with pytest.raises(ValueError):
            ucl_from_theta([0.0, 1.0, 1.0], LinearizationPoint(0.0, 1.0, 0.0))

    def test_point_validation(self):
        with pytest.raises(ValueError):
            LinearizationPoint(0.0, 0.0, 1.0)
        with pytest.raises(ValueError):
            LinearizationPoint(0.0, 1.0, -1.0)
        p = LinearizationPoint.from_prior(150.0, 2.0, 1.0)
        assert p.delta0_sq_bar == pytest.approx(0.005) and p.sigma0_sq_bar == pytest.approx(2.0)


class TestCoefficients:
    @pytest.mark.parametrize("lam", [0.0, 1.0, 4.0])
    def test_against_batch_posterior(self, lam):
        rng = np.random.default_rng(int(lam) + 40)
        locs = grid_locations(4, 4)
        point = LinearizationPoint.from_prior(rng.normal(50, 10), rng.uniform(0.5, 5), lam)
        choices, rewards = random_history(rng, 16, 25)
        coef = linearization_coefficients(choices, rewards, locs, point)
        corr = build_spatial_prior(locs, lam)
        s2, dbar = point.sigma_s_sq, point.delta0_sq_bar

        def post(mu0, delta_sq, k):
            return batch_belief(mu0, s2 / delta_sq, corr, s2, choices[:k], rewards[:k])

        for k in range(25):
            mu, cov, _ = post(point.mu0_bar, dbar, k)
            np.testing.assert_allclose(coef.e[k], mu, atol=1e-8)
            np.testing.assert_allclose(coef.c[k], np.diag(cov), rtol=1e-8)
            f = fd_jacobian(lambda v: post(v[0], dbar, k)[0], np.array([point.mu0_bar]), 1e-3)
            np.testing.assert_allclose(coef.f[k], f[:, 0], atol=1e-7)
            h = 1e-4 * dbar
            g = fd_jacobian(lambda v: post(point.mu0_bar, v[0], k)[0], np.array([dbar]), h)
            np.testing.assert_allclose(coef.g[k], g[:, 0], rtol=1e-5, atol=1e-6 * np.abs(g).max())
            dvar = fd_jacobian(lambda v: np.diag(post(point.mu0_bar, v[0], k)[1]),
                               np.array([dbar]), h)
            np.testing.assert_allclose(coef.d[k], -dvar[:, 0], rtol=1e-5)

    def test_empty_history_collapses(self):
        point = LinearizationPoint.from_prior(150.0, 2.0, 1.0)
        coef = linearization_coefficients([3, 7], [10.0, 20.0], LOCS, point)
        np.testing.assert_allclose(coef.e[0], 150.0)
        np.testing.assert_allclose(coef.f[0], 1.0)
        np.testing.assert_allclose(coef.g[0], 0.0)
        assert np.all(coef.c > 0)

    def test_features_before_any_reward(self):
        # an episode whose rewards equal the nominal mean leaves E = mu_bar, F = 1 at t = 2
        point = LinearizationPoint.from_prior(150.0, 2.0, 1.0)
        ds = linearize_episode(run_episode(ENV, HIGH, 0), LOCS, point)
        assert ds.times[0] == 2

    def test_arm_count_mismatch(self):
        with pytest.raises(ValueError):
            linearization_coefficients([0, 120], [1.0, 2.0], LOCS, LinearizationPoint(0, 1, 0))

    @pytest.mark.parametrize("lam", [0.0, 1.0, 4.0])
    def test_exact_at_nominal_point(self, lam):
        rng = np.random.default_rng(int(lam) + 7)
        for _ in range(5):
            mu_bar, s_bar = rng.uniform(0, 200), rng.uniform(0.2, 10)
            nu = rng.uniform(0.5, 8)
            params = UclParams(mu_bar, s_bar, lam, nu, 0.01)
            log = run_episode(ENV, params, int(rng.integers(1 << 30)))
            point = LinearizationPoint.from_prior(mu_bar, s_bar, lam)
            coef = linearization_coefficients(log.choices, log.rewards, LOCS, point)
            lin = linearized_objective(coef, [1 / nu, 0.0, 0.0])
            state = initial_belief(params, LOCS)
            for k in range(log.horizon):
                t = k + 1
                exact = ucl_heuristic(state, t) * math.log(t) / nu
                np.testing.assert_allclose(lin[k], exact, atol=1e-8, rtol=0)
                state = belief_update(state, log.choices[k], log.rewards[k], params)

    def test_exact_objective_matches_simulator(self):
        params = UclParams(120.0, 3.0, 4.0, 2.0, 0.01)
        log = run_episode(ENV, params, 5)
        exact = exact_objective(log.choices, log.rewards, LOCS, 120.0, 0.01 / 3.0, 4.0, 0.01, 2.0)
        state = initial_belief(params, LOCS)
        for k in range(log.horizon):
            t = k + 1
            np.testing.assert_allclose(exact[k], ucl_heuristic(state, t) * math.log(t) / 2.0,
                                       atol=1e-8, rtol=0)
            state = belief_update(state, log.choices[k], log.rewards[k], params)


class TestBounds:
    def test_lower_bound_fixture(self):
        point = LinearizationPoint.from_prior(150.0, 2.0, 1.0)
        coef = linearization_coefficients(*random_history(np.random.default_rng(0), 100, 30),
                                          LOCS, point)
        assert delta_bounds(coef)[0] == pytest.approx(-0.005)

    def test_empty_history_diagonal(self):
        point = LinearizationPoint.from_prior(40.0, 950.0, 0.0)
        coef = linearization_coefficients([0], [1.0], LOCS, point)
        lower, upper = delta_bounds(coef)
        assert lower == -point.delta0_sq_bar
        assert upper == pytest.approx(2 * point.delta0_sq_bar, rel=1e-12)
        np.testing.assert_allclose(coef.c[0], 0.01 / point.delta0_sq_bar, rtol=1e-12)
        np.testing.assert_allclose(coef.d[0], 0.01 / point.delta0_sq_bar ** 2, rtol=1e-12)

    @pytest.mark.parametrize("lam", [0.0, 1.0, 4.0])
    def test_upper_bound_stable_over_episode(self, lam):
        # per-step bounds may wiggle when arms are correlated but never drop
        # below the bound before the first reward
        point = LinearizationPoint.from_prior(150.0, 2.0, lam)
        for seed in (1, 2, 9):
            log = run_episode(ENV, HIGH, seed)
            coef = linearization_coefficients(log.choices, log.rewards, LOCS, point)
            per_t = (2 * coef.c / coef.d).min(axis=1)
            assert per_t.min() >= per_t[0] * (1 - 1e-9)
            assert delta_bounds(coef)[1] == pytest.approx(per_t[0], rel=1e-9)
            if lam == 0.0:
                assert np.all(np.diff(per_t) >= 0)

    def test_zero_d_means_unbounded(self):
        from softmaxfit.linearize import LinearizedCoefficients
        point = LinearizationPoint(0.0, 1.0, 0.0)
        z = np.zeros((1, 2))
        coef = LinearizedCoefficients(np.array([1]), np.ones((1, 2)), z, z, z, z, point)
        assert delta_bounds(coef) == (-1.0, math.inf)


class TestDatasets:
    def test_first_decision_dropped(self):
        point = LinearizationPoint.from_prior(150.0, 2.0, 1.0)
        log = run_episode(ENV, HIGH, 1)
        ds = linearize_episode(log, LOCS, point, episode_id="ep1")
        assert ds.data.n == 99 and ds.times[0] == 2
        np.testing.assert_array_equal(ds.data.chosen, log.choices[1:])
        coef = linearization_coefficients(log.choices, log.rewards, LOCS, point)
        np.testing.assert_allclose(ds.data.features[0] @ [1, 1, 1],
                                   linearized_objective(coef, [1, 1, 1])[1])
        np.testing.assert_array_equal(linearized_objective(coef, [1, 1, 1])[0], 0.0)

    def test_truncated(self):
        ds = linearize_episode(run_episode(ENV, HIGH, 2), LOCS,
                               LinearizationPoint.from_prior(150.0, 2.0, 1.0))
        short = ds.truncated(30)
        assert short.data.n == 29 and short.times[-1] == 30
        with pytest.raises(ValueError):
            ds.truncated(1)

    def test_provenance_and_csv(self, tmp_path):
        point = LinearizationPoint.from_prior(150.0, 2.0, 1.0)
        ds = linearize_episode(run_episode(ENV, HIGH, 3), LOCS, point, episode_id="e3")
        prov = ds.provenance()
        assert prov["linearization_point"]["mu0_bar"] == 150.0
        assert prov["delta_bounds"][0] == pytest.approx(-0.005)
        assert prov["sigma_s_sq"] == 0.01 and prov["schema_version"] == 1
        write_dataset_csv(ds.data, tmp_path / "x.csv")
        np.testing.assert_array_equal(read_dataset_csv(tmp_path / "x.csv").features,
                                      ds.data.features)

    def test_short_episode(self):
        from softmaxfit.bandit import EpisodeLog
        with pytest.raises(ValueError):
            linearize_episode(EpisodeLog([0], [1.0]), LOCS, LinearizationPoint(0, 1, 0))


class TestFitUcl:
    def test_fixture_episode(self):
        point = LinearizationPoint.from_prior(150.0, 2.0, 1.0)
        est = fit_ucl(linearize_episode(run_episode(ENV, HIGH, 4), LOCS, point))
        assert est.fit.converged and est.valid
        assert est.nu == pytest.approx(1 / est.theta[0])
        assert est.mu0 == pytest.approx(150.0 + est.theta[1] / est.theta[0])
        ci = est.confidence_intervals()
        assert ci.contains(theta_from_ucl(4.0, 200.0, 1.0, point))[:2].all()
        d = est.to_dict()
        assert d["linearization_point"]["sigma0_sq_bar"] == pytest.approx(2.0)
        assert len(d["transformed_covariance_delta_method"]) == 9

    def test_delta_method_jacobian(self):
        point = LinearizationPoint.from_prior(150.0, 2.0, 1.0)
        theta = np.array([0.25, 12.0, 5e-4])
        cov = np.diag([1e-4, 0.5, 1e-8])
        fit = FitResult(theta, cov, -1.0, True, 1, 0.0)
        est = _estimate_from_fit(fit, point, (-1.0, 1.0))

        def transform(t):
            return np.array([1 / t[0], point.mu0_bar + t[1] / t[0],
                             point.sigma_s_sq / (point.delta0_sq_bar + t[2] / t[0])])

        jac = fd_jacobian(transform, theta, 1e-9)
        np.testing.assert_allclose(est.transformed_covariance, jac @ cov @ jac.T, rtol=1e-5)
        np.testing.assert_allclose([est.nu, est.mu0, est.sigma0_sq], transform(theta), rtol=1e-12)

    def test_invalid_transform_flagged(self):
        point = LinearizationPoint.from_prior(150.0, 2.0, 1.0)
        fit = FitResult(np.array([-0.1, 1.0, 0.0]), np.eye(3), -1.0, True, 1, 0.0)
        est = _estimate_from_fit(fit, point, (-0.005, 0.01))
        assert not est.valid and est.nu is None
        np.testing.assert_array_equal(est.theta, [-0.1, 1.0, 0.0])
        fit = FitResult(np.array([0.25, 1.0, 0.01]), np.eye(3), -1.0, True, 1, 0.0)
        est = _estimate_from_fit(fit, point, (-0.005, 0.01))
        assert not est.valid and any("outside" in i for i in est.issues)

    def test_unidentified_refused(self):
        from softmaxfit.model import ChoiceDataset
        point = LinearizationPoint(0.0, 1.0, 0.0)
        ds = UclFeatureDataset(ChoiceDataset(np.zeros((5, 3, 3)), np.zeros(5, int)),
                               np.arange(2, 7), point, (-1.0, 2.0))
        assert not check_identification(ds.data).identified
        with pytest.raises(ValueError, match="not identified"):
            fit_ucl(ds)
        assert fit_ucl(ds, require_identified=False).fit.covariance is None


class TestPopulation:
    def fits(self, params, seeds, point):
        return [fit_ucl(linearize_episode(run_episode(ENV, params, s), LOCS, point))
                for s in seeds]

    def test_single_member(self):
        point = LinearizationPoint.from_prior(150.0, 2.0, 1.0)
        est = self.fits(HIGH, [1], point)
        pop = fit_population(est, ["a"])
        np.testing.assert_allclose(pop["groups"]["a"].theta, est[0].theta, atol=1e-12)
        assert pop["tests"] == []

    def test_distinct_groups_detected(self):
        point = LinearizationPoint.from_prior(150.0, 2.0, 1.0)
        other = UclParams(30.0, 1e3, 0.0, 0.5, 0.01)
        a = self.fits(HIGH, range(10, 20), point)
        b = [fit_ucl(linearize_episode(run_episode(ENV, other, s), LOCS, point),
                     require_identified=False) for s in range(20, 30)]
        pop = fit_population(a + b, ["hi"] * 10 + ["lo"] * 10)
        assert len(pop["tests"]) == 3
        assert min(t["p_value"] for t in pop["tests"]) < 0.05

    def test_small_group_unavailable(self):
        point = LinearizationPoint.from_prior(150.0, 2.0, 1.0)
        est = self.fits(HIGH, [1, 2, 3], point)
        pop = fit_population(est, ["a", "a", "b"])
        assert all("unavailable" in t for t in pop["tests"])
        assert set(pop["groups"]) == {"a", "b"}

    def test_mixed_points_rejected(self):
        a = self.fits(HIGH, [1], LinearizationPoint.from_prior(150.0, 2.0, 1.0))
        b = self.fits(HIGH, [2], LinearizationPoint.from_prior(250.0, 0.5, 1.0))
        with pytest.raises(ValueError):
            fit_population(a + b, ["g", "g"])
        with pytest.raises(ValueError):
            fit_population(a, ["g", "h"])


def test_recovery_coverage_by_thirty_decisions():
    # true theta inside the per-episode 95% CI for at least 60% of episodes at t = 30
    point = LinearizationPoint.from_prior(150.0, 2.0, 1.0)
    truth = theta_from_ucl(4.0, 200.0, 1.0, point)
    hits = []
    for s in range(100):
        ds = linearize_episode(run_episode(ENV, HIGH, 1000 + s), LOCS, point).truncated(30)
        est = fit_ucl(ds)
        if est.covariance is not None:
            hits.append(est.confidence_intervals().contains(truth))
    assert np.mean(hits, axis=0).min() >= 0.6

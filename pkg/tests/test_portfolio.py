import numpy as np
import pytest

from mlfci import portfolio
from mlfci.errors import NumericalError

import oracles


def random_pd_matrix(rng, R, min_eig=0.5):
    A = rng.standard_normal((R, R))
    return A @ A.T / R + min_eig * np.eye(R)


class TestMvWeights:
    def test_zero_forecast_zero_weights(self, rng):
        sigma = random_pd_matrix(rng, 4)
        w = portfolio.mv_weights(np.zeros(4), sigma, 2.0)
        np.testing.assert_allclose(w.omega, 0.0, atol=1e-14)

    def test_scalar_formula(self):
        w = portfolio.mv_weights(np.array([0.06]), np.array([[0.04]]), 3.0)
        assert w.omega[0] == pytest.approx(0.5, rel=1e-12)

    def test_residual_identity(self, rng):
        sigma = random_pd_matrix(rng, 3)
        z = rng.standard_normal(3) * 0.05
        w = portfolio.mv_weights(z, sigma, 2.5)
        np.testing.assert_allclose(sigma @ w.omega * 2.5, z, atol=1e-10)

    def test_singular_sigma_raises(self):
        with pytest.raises(NumericalError):
            portfolio.mv_weights(np.ones(2), np.ones((2, 2)), 1.0)


class TestSoftThreshold:
    def test_basic(self):
        # w_mv = 0.5, lam = 0.2 via q = 0.2 * gamma * sigma2
        assert portfolio.soft_threshold_weight(0.5 * 3 * 0.04, 0.2 * 3 * 0.04,
                                               0.04, 3.0) == pytest.approx(0.3)

    def test_corollary_numbers(self):
        # z=0.06, sigma2=0.04, gamma=3, q=0.03 -> w_mv=0.5, lam=0.25, w=0.25
        assert portfolio.soft_threshold_weight(0.06, 0.03, 0.04, 3.0) == \
            pytest.approx(0.25, rel=1e-12)

    def test_non_participation_region(self):
        assert portfolio.soft_threshold_weight(0.01, 0.03, 0.04, 3.0) == 0.0
        # kink exactly: |w_mv| == lam -> 0
        assert portfolio.soft_threshold_weight(0.03, 0.03, 0.04, 3.0) == 0.0

    def test_sign_symmetry(self):
        w = portfolio.soft_threshold_weight(-0.4 * 2 * 0.1, 0.15 * 2 * 0.1, 0.1, 2.0)
        assert w == pytest.approx(-0.25, rel=1e-12)


class TestUaWeights:
    def test_zero_penalty_recovers_mv(self, rng):
        for _ in range(20):
            R = int(rng.integers(1, 7))
            sigma = random_pd_matrix(rng, R)
            z = rng.standard_normal(R) * 0.1
            prob = portfolio.UaProblem(z_hat=z, q_alpha=np.zeros(R), sigma=sigma,
                                       gamma=2.0)
            ua = portfolio.ua_weights(prob)
            mv = portfolio.mv_weights(z, sigma, 2.0)
            np.testing.assert_allclose(ua.omega, mv.omega, atol=1e-8)

    def test_single_asset_matches_soft_threshold(self, rng):
        for _ in range(50):
            z = float(rng.standard_normal()) * 0.1
            q = float(rng.uniform(0, 0.1))
            s2 = float(rng.uniform(0.01, 0.2))
            gamma = float(rng.uniform(0.5, 5))
            prob = portfolio.UaProblem(z_hat=np.array([z]), q_alpha=np.array([q]),
                                       sigma=np.array([[s2]]), gamma=gamma)
            ua = portfolio.ua_weights(prob)
            ref = portfolio.soft_threshold_weight(z, q, s2, gamma)
            assert abs(ua.omega[0] - ref) <= 1e-8

    def test_diagonal_sigma_decouples(self, rng):
        R = 5
        diag = rng.uniform(0.02, 0.2, size=R)
        z = rng.standard_normal(R) * 0.08
        q = rng.uniform(0, 0.05, size=R)
        gamma = 1.7
        prob = portfolio.UaProblem(z_hat=z, q_alpha=q, sigma=np.diag(diag), gamma=gamma)
        ua = portfolio.ua_weights(prob)
        ref = [portfolio.soft_threshold_weight(z[i], q[i], diag[i], gamma)
               for i in range(R)]
        np.testing.assert_allclose(ua.omega, ref, atol=1e-8)

    def test_objective_beats_subgradient_oracle(self, rng):
        prob_z = rng.standard_normal(5) * 0.3
        sigma = random_pd_matrix(rng, 5)
        q = rng.uniform(0, 0.2, size=5)
        prob = portfolio.UaProblem(z_hat=prob_z, q_alpha=q, sigma=sigma, gamma=1.0)
        ua = portfolio.ua_weights(prob)
        oracle_obj = oracles.subgradient_ua(prob_z, q, sigma, 1.0, iters=10**6)
        assert ua.objective <= oracle_obj + 1e-6
        assert abs(ua.objective - oracle_obj) <= 1e-6

    def test_kkt_residual_small(self, rng):
        sigma = random_pd_matrix(rng, 6)
        prob = portfolio.UaProblem(z_hat=rng.standard_normal(6) * 0.1,
                                   q_alpha=rng.uniform(0, 0.05, 6),
                                   sigma=sigma, gamma=2.0)
        assert portfolio.ua_weights(prob).kkt_residual <= 1e-8

    def test_monotone_participation(self, rng):
        sigma = random_pd_matrix(rng, 4)
        z = rng.standard_normal(4) * 0.1
        gamma = 1.5
        base_q = rng.uniform(0.0, 0.02, size=4)
        prev = None
        for scale in (0.0, 0.5, 1.0, 2.0, 5.0, 20.0):
            prob = portfolio.UaProblem(z_hat=z, q_alpha=base_q * scale + 0.001 * scale,
                                       sigma=sigma, gamma=gamma)
            w = np.abs(portfolio.ua_weights(prob).omega).sum()
            if prev is not None:
                assert w <= prev + 1e-7
            prev = w

    def test_kkt_zero_weight_condition(self, rng):
        # crank one asset's q above its gradient bound: weight must be exactly 0
        sigma = random_pd_matrix(rng, 3)
        z = np.array([0.08, -0.05, 0.02])
        prob = portfolio.UaProblem(z_hat=z, q_alpha=np.array([0.0, 0.0, 10.0]),
                                   sigma=sigma, gamma=1.0)
        ua = portfolio.ua_weights(prob)
        assert ua.omega[2] == 0.0

    def test_budget_constraint_sums_to_one(self, rng):
        for _ in range(10):
            R = int(rng.integers(2, 7))
            sigma = random_pd_matrix(rng, R)
            prob = portfolio.UaProblem(z_hat=rng.standard_normal(R) * 0.1,
                                       q_alpha=rng.uniform(0, 0.05, R),
                                       sigma=sigma, gamma=2.0,
                                       budget_constraint=True)
            w = portfolio.ua_weights(prob)
            assert abs(w.omega.sum() - 1.0) <= 1e-8

    def test_budget_two_asset_matches_closed_form(self, rng):
        for _ in range(25):
            sigma = random_pd_matrix(rng, 2, min_eig=0.2)
            z = rng.standard_normal(2) * 0.2
            q = rng.uniform(0, 0.15, size=2)
            gamma = float(rng.uniform(0.5, 3.0))
            prob = portfolio.UaProblem(z_hat=z, q_alpha=q, sigma=sigma, gamma=gamma,
                                       budget_constraint=True)
            iterative = portfolio.ua_weights(prob)
            closed = portfolio.two_asset_no_riskfree(z, q, sigma, gamma)
            np.testing.assert_allclose(iterative.omega, closed.omega, atol=5e-7)

    def test_cholesky_reformulation_objective_differs_by_constant(self, rng):
        # (gamma/2) w'Sw - w'z + q'|w| and 0.5||Y*-X*w||^2 + ||Q w||_1 differ
        # by a constant independent of w
        R = 4
        sigma = random_pd_matrix(rng, R)
        z = rng.standard_normal(R) * 0.1
        q = rng.uniform(0, 0.05, R)
        gamma = 1.8
        L = np.linalg.cholesky(sigma)
        x_star = np.sqrt(gamma) * L.T
        y_star = np.linalg.solve(L, z) / np.sqrt(gamma)
        diffs = []
        for _ in range(30):
            w = rng.standard_normal(R)
            direct = 0.5 * gamma * w @ sigma @ w - w @ z + q @ np.abs(w)
            lasso = 0.5 * np.sum((y_star - x_star @ w) ** 2) + q @ np.abs(w)
            diffs.append(lasso - direct)
        assert np.ptp(diffs) <= 1e-10


class TestTwoAsset:
    @staticmethod
    def _mv_budget(z, sigma, gamma):
        var_diff = sigma[0, 0] + sigma[1, 1] - 2 * sigma[0, 1]
        c0 = 1.0 / (gamma * var_diff)
        return c0 * (z[0] - z[1] - gamma * (sigma[0, 1] - sigma[1, 1]))

    def test_zero_uncertainty_recovers_budget_mv(self, rng):
        for _ in range(20):
            sigma = random_pd_matrix(rng, 2, min_eig=0.3)
            z = rng.standard_normal(2) * 0.2
            gamma = float(rng.uniform(0.5, 4))
            res = portfolio.two_asset_no_riskfree(z, np.zeros(2), sigma, gamma)
            assert res.omega[0] == pytest.approx(self._mv_budget(z, sigma, gamma),
                                                 rel=1e-10, abs=1e-12)

    def test_non_participation_band(self):
        sigma = np.array([[0.05, 0.01], [0.01, 0.04]])
        gamma = 2.0
        q = np.array([0.5, 0.1])  # huge uncertainty on asset 1
        # construct z so the budget-MV weight sits inside the band
        z = np.array([0.01, 0.02])
        w1_mv = self._mv_budget(z, sigma, gamma)
        var_diff = sigma[0, 0] + sigma[1, 1] - 2 * sigma[0, 1]
        c0 = 1.0 / (gamma * var_diff)
        assert -c0 * (q[0] + q[1]) < w1_mv < c0 * (q[0] - q[1])
        res = portfolio.two_asset_no_riskfree(z, q, sigma, gamma)
        assert res.omega[0] == 0.0 and res.omega[1] == 1.0

    def test_matches_grid_search_oracle(self, rng):
        for _ in range(40):
            sigma = random_pd_matrix(rng, 2, min_eig=0.3)
            z = rng.standard_normal(2) * 0.3
            q = rng.uniform(0, 0.2, size=2)
            gamma = float(rng.uniform(0.5, 3))
            res = portfolio.two_asset_no_riskfree(z, q, sigma, gamma)
            w_ref = oracles.two_asset_grid_search(
                z, q, sigma, gamma,
                lo=res.omega[0] - 0.6, hi=res.omega[0] + 0.6)
            assert abs(res.omega[0] - w_ref) <= 2e-4

    def test_exactly_one_branch_fires(self, rng):
        # the branch labels partition instance space: one label per instance,
        # and the labelled formula reproduces the weight
        seen = set()
        for _ in range(400):
            sigma = random_pd_matrix(rng, 2, min_eig=0.2)
            z = rng.standard_normal(2) * 0.5
            q = rng.uniform(0, 0.3, size=2)
            gamma = float(rng.uniform(0.3, 3))
            res = portfolio.two_asset_no_riskfree(z, q, sigma, gamma)
            seen.add(res.diagnostics["branch"])
            var_diff = sigma[0, 0] + sigma[1, 1] - 2 * sigma[0, 1]
            c0 = 1.0 / (gamma * var_diff)
            w1_mv = res.diagnostics["w1_mv"]
            conds = {
                "short_asset_2": w1_mv - c0 * (q[0] + q[1]) > 1.0,
                "all_in_asset_1": (w1_mv - c0 * (q[0] - q[1]) > 1.0
                                   >= w1_mv - c0 * (q[0] + q[1])),
                "interior": 0.0 < w1_mv - c0 * (q[0] - q[1]) <= 1.0,
                "non_participation_asset_1": (w1_mv - c0 * (q[0] - q[1]) <= 0.0
                                              < w1_mv + c0 * (q[0] + q[1])),
                "short_asset_1": w1_mv + c0 * (q[0] + q[1]) <= 0.0,
            }
            assert sum(conds.values()) == 1
            assert conds[res.diagnostics["branch"]]
        assert "interior" in seen and "non_participation_asset_1" in seen

    def test_degenerate_variance_raises(self):
        sigma = np.array([[0.04, 0.04], [0.04, 0.04]])
        with pytest.raises(NumericalError):
            portfolio.two_asset_no_riskfree(np.array([0.1, 0.2]), np.zeros(2),
                                            sigma, 1.0)


class TestRsWeights:
    @staticmethod
    def _bracketed_form(problem):
        # independent evaluation of the double-shrinkage expression
        R = len(problem.z_hat)
        v = problem.prior_scale * problem.sigma
        w1 = problem.fse2 @ np.linalg.inv(problem.fse2 + v)
        sigma_tilde = problem.sigma + v @ w1.T
        w_mv = np.linalg.inv(problem.sigma) @ problem.z_hat / problem.gamma
        w_pi = np.linalg.inv(problem.sigma) @ problem.prior_mean / problem.gamma
        return (problem.gamma / (problem.tau + problem.gamma)) * \
            np.linalg.inv(sigma_tilde) @ problem.sigma @ (
                (np.eye(R) - w1).T @ w_mv + w1.T @ w_pi)

    def test_two_forms_agree(self, rng):
        for _ in range(50):
            R = int(rng.integers(1, 6))
            sigma = random_pd_matrix(rng, R)
            fse = rng.uniform(0.01, 0.3, size=R)
            prob = portfolio.RsProblem(
                z_hat=rng.standard_normal(R) * 0.1, fse2=np.diag(fse ** 2),
                prior_mean=rng.standard_normal(R) * 0.05,
                prior_scale=float(rng.uniform(0.1, 5)), sigma=sigma,
                gamma=float(rng.uniform(0.5, 4)), tau=float(rng.uniform(0.1, 3)))
            direct = portfolio.rs_weights(prob).omega
            np.testing.assert_allclose(direct, self._bracketed_form(prob),
                                       rtol=0, atol=1e-10)

    def test_zero_uncertainty_limit(self, rng):
        sigma = random_pd_matrix(rng, 3)
        z = rng.standard_normal(3) * 0.1
        gamma, tau = 2.0, 1.0
        prob = portfolio.RsProblem(z_hat=z, fse2=np.zeros((3, 3)),
                                   prior_mean=np.zeros(3), prior_scale=1.0,
                                   sigma=sigma, gamma=gamma, tau=tau)
        res = portfolio.rs_weights(prob)
        mv = portfolio.mv_weights(z, sigma, gamma)
        np.testing.assert_allclose(res.omega, gamma / (tau + gamma) * mv.omega,
                                   atol=1e-12)

    def test_scalar_infinite_uncertainty_limit(self):
        z, pi = 0.08, 0.03
        sigma2, g, gamma, tau = 0.04, 1.5, 2.0, 1.0
        v = g * sigma2
        prob = portfolio.RsProblem(z_hat=np.array([z]), fse2=np.array([[1e16]]),
                                   prior_mean=np.array([pi]), prior_scale=g,
                                   sigma=np.array([[sigma2]]), gamma=gamma, tau=tau)
        res = portfolio.rs_weights(prob)
        w_pi_mv = pi / (sigma2 * gamma)
        limit = w_pi_mv * sigma2 / (v + sigma2) * gamma / (tau + gamma)
        assert res.omega[0] == pytest.approx(limit, rel=1e-10)

    def test_scalar_direct_algebra(self, rng):
        # scalar posterior-then-maximize against the closed scalar expression
        for _ in range(30):
            z = float(rng.standard_normal()) * 0.1
            pi = float(rng.standard_normal()) * 0.05
            fse2 = float(rng.uniform(0, 0.01))
            sigma2 = float(rng.uniform(0.01, 0.1))
            g = float(rng.uniform(0.2, 4))
            gamma = float(rng.uniform(0.5, 3))
            tau = float(rng.uniform(0.2, 2))
            v = g * sigma2
            w1 = fse2 / (fse2 + v)
            w_mv, w_pi = z / (sigma2 * gamma), pi / (sigma2 * gamma)
            expected = (w_mv * (1 - w1) + w_pi * w1) * sigma2 / (v * w1 + sigma2) \
                * gamma / (tau + gamma)
            prob = portfolio.RsProblem(z_hat=np.array([z]), fse2=np.array([[fse2]]),
                                       prior_mean=np.array([pi]), prior_scale=g,
                                       sigma=np.array([[sigma2]]), gamma=gamma, tau=tau)
            assert portfolio.rs_weights(prob).omega[0] == pytest.approx(
                expected, rel=1e-12, abs=1e-14)


class TestCovariance:
    def test_delta_zero_is_sample_covariance(self, rng):
        X = rng.standard_normal((30, 4))
        S = portfolio.estimate_covariance(X, shrinkage=0.0)
        Xc = X - X.mean(axis=0)
        np.testing.assert_allclose(S, Xc.T @ Xc / 30, atol=1e-14)

    def test_delta_one_is_scaled_identity(self, rng):
        X = rng.standard_normal((30, 4))
        S = portfolio.estimate_covariance(X, shrinkage=1.0)
        assert np.allclose(S, S[0, 0] * np.eye(4))

    def test_auto_recovers_truth_in_large_samples(self, rng):
        true_cov = random_pd_matrix(rng, 5, min_eig=0.2)
        X = rng.multivariate_normal(np.zeros(5), true_cov, size=5000)
        for shrink in ("auto", 0.0):
            S = portfolio.estimate_covariance(X, shrinkage=shrink)
            rel = np.linalg.norm(S - true_cov) / np.linalg.norm(true_cov)
            assert rel < 0.05

    def test_auto_delta_in_unit_interval_and_pd(self, rng):
        X = rng.standard_normal((10, 8))  # T close to R: heavy shrinkage
        S = portfolio.estimate_covariance(X, shrinkage="auto")
        np.linalg.cholesky(S)

    def test_degenerate_input_rejected(self):
        X = np.ones((5, 3))
        with pytest.raises(NumericalError):
            portfolio.estimate_covariance(X, shrinkage=0.0)


class TestConfidenceToQ:
    def test_quantile_values(self):
        assert portfolio.confidence_to_q(1.0, 0.75) == pytest.approx(1.150349, abs=1e-5)
        assert portfolio.confidence_to_q(1.0, 0.75) == pytest.approx(
            oracles.two_sided_critical(0.75), abs=1e-8)

    def test_zero_se(self):
        assert portfolio.confidence_to_q(0.0, 0.95) == 0.0

    def test_bonferroni_level(self):
        # alpha = 0.05 over 100 assets -> per-asset level 0.9995
        q = portfolio.confidence_to_q(1.0, 0.95, n_assets=100)
        assert q == pytest.approx(oracles.two_sided_critical(0.9995), abs=5e-9)

    def test_vector_input(self):
        q = portfolio.confidence_to_q(np.array([1.0, 2.0]), 0.5)
        np.testing.assert_allclose(q, 0.674490 * np.array([1.0, 2.0]), atol=1e-5)


def test_gmvp_weights(rng):
    sigma = random_pd_matrix(rng, 5)
    w = portfolio.gmvp_weights(sigma).omega
    assert w.sum() == pytest.approx(1.0, abs=1e-12)
    # any other budget-feasible portfolio has at least this variance
    for _ in range(20):
        other = rng.standard_normal(5)
        other /= other.sum()
        assert other @ sigma @ other >= w @ sigma @ w - 1e-12

import math

import numpy as np
import pytest

from sgrgmm.datagen import CloudSpec, make_cloud, rng_contract
from sgrgmm.errors import BadEpsilon, DimMismatch, EmptyCloud, StepSizeOutOfRange
from sgrgmm.sgr import (
    GradientCloud,
    SgrConfig,
    gain_matrix,
    mw_loss,
    normalizing_scale,
    run_mw_mmw,
    run_sgr,
    theory_constants,
    weighted_covariance,
    weighted_mean,
)
from sgrgmm.specmat import gibbs_state, op_norm
from sgrgmm.weights import kl_project, uniform


def labeled_cloud(rng, n=60, p=4, eps=0.2, shift=6.0):
    n_out = int(np.floor(eps * n))
    pts = rng.standard_normal((n, p))
    mask = np.zeros(n, dtype=bool)
    idx = rng.choice(n, size=n_out, replace=False)
    pts[idx] += shift * np.eye(p)[0] + 0.2 * rng.standard_normal((n_out, p))
    mask[idx] = True
    return GradientCloud(pts, outlier_mask=mask)


class TestNormalizingScale:
    def test_single_point(self):
        assert normalizing_scale(GradientCloud(np.zeros((1, 3)))) == 0.0

    def test_two_points(self):
        pts = np.array([[0.0, 0.0], [3.0, 0.0]])
        assert np.isclose(normalizing_scale(GradientCloud(pts)), 9.0)

    def test_three_collinear(self):
        pts = np.array([[0.0], [1.0], [2.0]])
        assert np.isclose(normalizing_scale(GradientCloud(pts)), 4.0)

    def test_large_n_upper_bound(self):
        rng = np.random.default_rng(0)
        pts = rng.standard_normal((6000, 2))
        nu = normalizing_scale(GradientCloud(pts))
        sq = np.sum(pts * pts, axis=1)
        exact = (sq[:, None] + sq[None, :] - 2 * pts @ pts.T).max()
        assert nu >= exact - 1e-9

    def test_empty(self):
        with pytest.raises(EmptyCloud):
            GradientCloud(np.empty((0, 2)))


class TestMwLoss:
    def test_identity_scaled(self):
        z = np.array([1.0, 2.0, 3.0])
        rho = np.eye(3) / 3
        assert np.isclose(mw_loss(z, rho), np.dot(z, z) / 3)

    def test_rank_one(self):
        v = np.array([1.0, 0.0])
        z = np.array([2.0, 5.0])
        assert np.isclose(mw_loss(z, np.outer(v, v)), 4.0)

    def test_zero_vector(self):
        assert mw_loss(np.zeros(2), np.eye(2) / 2) == 0.0

    def test_dim_mismatch(self):
        with pytest.raises(DimMismatch):
            mw_loss(np.ones(3), np.eye(2))


class TestGainMatrix:
    def test_two_points(self):
        pts = np.array([[1.0, 0.0], [-1.0, 0.0]])
        s = gain_matrix(pts, np.array([0.5, 0.5]), np.zeros(2))
        assert np.allclose(s, np.diag([1.0, 0.0]))

    def test_all_at_center(self):
        pts = np.tile([2.0, -1.0], (5, 1))
        s = gain_matrix(pts, np.full(5, 0.2), np.array([2.0, -1.0]))
        assert np.allclose(s, 0.0)

    def test_matches_direct_sum(self):
        rng = np.random.default_rng(1)
        pts = rng.standard_normal((5, 2))
        w = rng.dirichlet(np.ones(5))
        c = rng.standard_normal(2)
        direct = sum(w[n] * np.outer(pts[n] - c, pts[n] - c) for n in range(5))
        assert np.max(np.abs(gain_matrix(pts, w, c) - direct)) <= 1e-12


class TestIdentities:
    def test_centering_identity(self):
        # fixed-center second moment = own-mean covariance + mean-offset dyad
        rng = np.random.default_rng(2)
        for _ in range(200):
            n, p = int(rng.integers(3, 12)), int(rng.integers(1, 5))
            pts = rng.standard_normal((n, p)) * rng.uniform(0.5, 2.0)
            w = rng.dirichlet(np.ones(n))
            c = rng.standard_normal(p)
            mean = pts.T @ w
            lhs = gain_matrix(pts, w, c)
            rhs = weighted_covariance(pts, w) + np.outer(mean - c, mean - c)
            assert np.max(np.abs(lhs - rhs)) <= 1e-10

    def test_inlier_outlier_decomposition(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            n = int(rng.integers(6, 20))
            p = int(rng.integers(1, 4))
            eps = float(rng.uniform(0.05, 0.32))
            pts = rng.standard_normal((n, p))
            w = kl_project(rng.uniform(0.01, 1, n), eps).values
            n_out = int(np.floor(eps * n))
            if n_out == 0:
                continue
            out = np.zeros(n, dtype=bool)
            out[rng.choice(n, size=n_out, replace=False)] = True
            t_out, t_in = w[out].sum(), w[~out].sum()
            # weight masses
            assert t_out <= eps / (1 - eps) + 1e-9
            assert np.isclose(t_in, 1 - t_out)
            # mean split
            mean = pts.T @ w
            mean_in = pts[~out].T @ w[~out] / t_in
            mean_out = pts[out].T @ w[out] / t_out
            assert np.max(np.abs(mean - (t_in * mean_in + t_out * mean_out))) <= 1e-10
            # covariance split
            cov = weighted_covariance(pts, w)
            cov_in = gain_matrix(pts[~out], w[~out], mean_in)
            cov_out = gain_matrix(pts[out], w[out], mean_out)
            delta = mean_in - mean_out
            rhs = cov_in + cov_out + t_in * t_out * np.outer(delta, delta)
            assert np.max(np.abs(cov - rhs)) <= 1e-10

    def test_range_bounds(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            cloud = GradientCloud(rng.standard_normal((12, 3)) * 2)
            nu = normalizing_scale(cloud)
            center = cloud.vectors.mean(axis=0)
            w = rng.dirichlet(np.ones(12))
            s = gain_matrix(cloud, w, center)
            evals = np.linalg.eigvalsh(s)
            assert evals.min() >= -1e-8
            assert evals.max() <= nu + 1e-8
            rho = gibbs_state(s, 0.5)
            for z in cloud.vectors - center:
                assert -1e-9 <= mw_loss(z, rho) <= nu + 1e-9


class TestRunMwMmw:
    def test_all_equal_cloud(self):
        pts = np.tile([1.0, 2.0], (8, 1))
        cfg = SgrConfig(epsilon=0.1, inner_rounds=16, eta_w=0.0, eta_rho=1.0)
        w, s, gamma = run_mw_mmw(pts, np.array([1.0, 2.0]), uniform(8, 0.1), cfg)
        assert np.allclose(w.values, 1.0 / 8)
        assert gamma == 0.0

    def test_averaged_gain_linearity(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            n, p = int(rng.integers(4, 10)), int(rng.integers(1, 4))
            pts = rng.standard_normal((n, p))
            cfg = SgrConfig(epsilon=0.2, inner_rounds=8, eta_w_scale=0.4, eta_rho_scale=0.4)
            center = pts.mean(axis=0)
            w, s_bar, _ = run_mw_mmw(pts, center, uniform(n, 0.2), cfg)
            assert np.max(np.abs(s_bar - gain_matrix(pts, w, center))) <= 1e-10

    def test_1d_minimax_oracle(self):
        # three inliers at 0, one outlier at 10, cap 1/3: optimum zeroes the
        # outlier, so the certificate must approach zero on the loss scale
        pts = np.array([[0.0], [0.0], [0.0], [10.0]])
        cfg = SgrConfig(epsilon=0.25, inner_rounds=2048, eta_w_scale=0.5, eta_rho_scale=0.5)
        w, _, gamma = run_mw_mmw(pts, np.zeros(1), uniform(4, 0.25), cfg)
        nu = normalizing_scale(GradientCloud(pts))
        opt = 0.0  # grid search over w_out: min of 100 * w_out at w_out = 0
        assert gamma <= opt + 0.05 * nu

    def test_step_size_contract(self):
        pts = np.random.default_rng(6).standard_normal((10, 2))
        nu = normalizing_scale(GradientCloud(pts))
        cfg = SgrConfig(epsilon=0.1, inner_rounds=8, eta_w=10.0 / nu, eta_rho=0.1 / nu)
        with pytest.raises(StepSizeOutOfRange):
            run_mw_mmw(pts, pts.mean(axis=0), uniform(10, 0.1), cfg)

    def test_auto_steps_need_rounds(self):
        pts = np.random.default_rng(7).standard_normal((10, 40))
        cfg = SgrConfig(epsilon=0.1, inner_rounds=4)  # 4 < 4*log(40)
        with pytest.raises(StepSizeOutOfRange):
            run_mw_mmw(pts, pts.mean(axis=0), uniform(10, 0.1), cfg)


class TestCertificateRegret:
    def test_regret_bound_on_labeled_clouds(self):
        # certificate <= (1+er*nu)(1+ew*nu) * gamma(oracle) +
        #   (1+er*nu)*log(1/(1-eps))/(T*ew) + log(p)/(T*er)
        rng = np.random.default_rng(8)
        for _ in range(50):
            n = int(rng.integers(20, 50))
            p = int(rng.integers(2, 5))
            eps = float(rng.uniform(0.05, 0.3))
            cloud = labeled_cloud(rng, n=n, p=p, eps=eps, shift=rng.uniform(3, 8))
            nu = normalizing_scale(cloud)
            t_rounds = 64
            cfg = SgrConfig(epsilon=eps, inner_rounds=t_rounds)
            center = cloud.vectors.mean(axis=0)
            _, _, gamma = run_mw_mmw(cloud, center, uniform(n, eps), cfg)
            # oracle inlier weight: uniform on the true inliers (feasible)
            w_sharp = np.where(cloud.outlier_mask, 0.0, 1.0)
            w_sharp /= w_sharp.sum()
            assert w_sharp.max() <= 1.0 / ((1 - eps) * n) + 1e-12
            gamma_sharp = op_norm(gain_matrix(cloud, w_sharp, center))
            eta_w = math.sqrt(math.log(1 / (1 - eps)) / t_rounds) / nu
            eta_r = math.sqrt(math.log(p) / t_rounds) / nu
            bound = (
                (1 + eta_r * nu) * (1 + eta_w * nu) * gamma_sharp
                + (1 + eta_r * nu) * math.log(1 / (1 - eps)) / (t_rounds * eta_w)
                + math.log(p) / (t_rounds * eta_r)
            )
            assert gamma <= bound + 1e-6


class TestRunSgr:
    def test_clean_epsilon_zero(self):
        rng = np.random.default_rng(9)
        pts = rng.standard_normal((100, 3))
        w, report = run_sgr(GradientCloud(pts), SgrConfig(epsilon=0.0))
        assert np.array_equal(w.values, np.full(100, 0.01))
        assert report.stop_reason == "epsilon_zero_singleton"
        mean = weighted_mean(pts, w)
        assert np.linalg.norm(mean - pts.mean(axis=0)) <= 2.0 / 10.0

    def test_recovers_mean_under_contamination(self):
        spec = CloudSpec(n=300, dim=6, epsilon=0.15, strength=7.0, seed=5)
        cloud = make_cloud(spec, rng=rng_contract(5, 0, 0))
        cfg = SgrConfig(
            epsilon=0.15, inner_rounds=64, s_max=30, c_stop=0.0,
            eta_w_scale=0.5, eta_rho_scale=0.5,
        )
        w, report = run_sgr(cloud, cfg, truth_mean=spec.inlier_mean)
        assert report.outlier_mass[-1] <= 1e-3
        assert report.mean_error[-1] <= 0.3

    def test_contraction_consequence(self):
        # weighted-mean error <= empirical inlier deviation + alpha*sqrt(gamma)
        rng = np.random.default_rng(10)
        violations = 0
        for _ in range(20):
            eps = 0.2
            cloud = labeled_cloud(rng, n=50, p=3, eps=eps, shift=5.0)
            inl = cloud.vectors[~cloud.outlier_mask]
            truth = inl.mean(axis=0)
            cfg = SgrConfig(epsilon=eps, inner_rounds=64, s_max=10, c_stop=0.0)
            w, rep = run_sgr(cloud, cfg)
            gamma = rep.spectral_norm[-1]
            # surrogate for the inlier-mean deviation: max over random
            # feasible inlier reweightings
            delta_hat = 0.0
            m = inl.shape[0]
            sub_eps = eps / (1 - eps)
            for _ in range(200):
                wi = kl_project(rng.uniform(0.01, 1, m), min(sub_eps, 0.329)).values
                delta_hat = max(delta_hat, np.linalg.norm(inl.T @ wi - truth))
            alpha = math.sqrt(eps / (1 - 2 * eps))
            err = np.linalg.norm(weighted_mean(cloud, w) - truth)
            if err > delta_hat + alpha * math.sqrt(gamma) + 0.05 * math.sqrt(gamma) + 1e-6:
                violations += 1
        assert violations == 0

    def test_discretized_optimum(self):
        # certificate of the returned weights is near the best candidate
        # from a large random feasible discretization
        rng = np.random.default_rng(11)
        eps = 0.25
        pts = rng.standard_normal((6, 2))
        pts[0] += np.array([12.0, 0.0])
        cloud = GradientCloud(pts)
        cfg = SgrConfig(epsilon=eps, inner_rounds=512, s_max=40, c_stop=0.0,
                        eta_w_scale=0.5, eta_rho_scale=0.5)
        w, rep = run_sgr(cloud, cfg)
        gamma_self = op_norm(weighted_covariance(pts, w))
        best = np.inf
        for _ in range(10000):
            cand = rng.dirichlet(np.ones(6) * rng.uniform(0.3, 3.0))
            if cand.max() > 1.0 / ((1 - eps) * 6):
                continue
            best = min(best, op_norm(weighted_covariance(pts, cand)))
        assert gamma_self <= 1.10 * best

    def test_report_csv_columns(self):
        rng = np.random.default_rng(12)
        cloud = labeled_cloud(rng, n=40, p=3, eps=0.2)
        cfg = SgrConfig(epsilon=0.2, inner_rounds=32, s_max=5, c_stop=0.0)
        _, rep = run_sgr(cloud, cfg, truth_mean=np.zeros(3))
        rows = rep.rows()
        assert len(rows) == rep.iterations
        assert set(rows[0]) == {
            "s", "gamma", "mean_error", "outlier_mass",
            "weight_l1_change", "center_l2_change", "stop_reason",
        }
        assert rows[-1]["stop_reason"] != ""


class TestTheoryConstants:
    def test_alpha_values(self):
        assert theory_constants(0.0, 64, 10, 1.0, 1.0, 0.0, 0.0, 1.0)["alpha"] == 0.0
        out = theory_constants(0.1, 64, 10, 1.0, 1.0, 0.0, 0.0, 1.0)
        assert abs(out["alpha"] - math.sqrt(0.1 / 0.8)) <= 1e-12

    def test_alpha_monotone_to_one(self):
        grid = np.linspace(0.0, 0.333, 40)
        vals = [
            theory_constants(e, 64, 10, 1.0, 1.0, 0.0, 0.0, 1.0)["alpha"] for e in grid
        ]
        assert np.all(np.diff(vals) > 0)
        assert vals[-1] < 1.0 and vals[-1] > 0.99 * math.sqrt(0.333 / (1 - 0.666))

    def test_delta_t_formula(self):
        out = theory_constants(0.1, 100, 8, 2.0, 1.0, 0.0, 0.0, 1.0)
        expected = 4 * 2.0 * (
            math.sqrt(math.log(1 / 0.9) / 100) + math.sqrt(math.log(8) / 100)
        )
        assert abs(out["delta_T"] - expected) <= 1e-12

    def test_residual_and_radius(self):
        out = theory_constants(0.1, 100, 8, 2.0, 1.5, 0.2, 0.1, 1.0)
        alpha, dt = out["alpha"], out["delta_T"]
        expected = (1 + alpha) * 0.2 + alpha * math.sqrt(1.5 + 0.1 + dt)
        assert abs(out["R_epsT"] - expected) <= 1e-12
        assert abs(out["R_inf"] - expected / (1 - alpha)) <= 1e-12

    def test_iteration_bound(self):
        out = theory_constants(
            0.1, 100, 8, 2.0, 1.5, 0.2, 0.1, 10.0, target_radius=5.0
        )
        alpha, r_inf = out["alpha"], out["R_inf"]
        manual = 1 + math.ceil(
            math.log((10.0 - r_inf) / (5.0 - r_inf)) / math.log(1 / alpha)
        )
        assert out["s_max_bound"] == manual

    def test_bad_epsilon(self):
        with pytest.raises(BadEpsilon):
            theory_constants(0.4, 64, 10, 1.0, 1.0, 0.0, 0.0, 1.0)


class TestPlugInThreshold:
    def test_certificate_fires_with_default_threshold(self):
        # c_stop=None selects the inlier-scale plug-in; on a well-separated
        # cloud the certificate stop fires once the outliers are downweighted
        rng = np.random.default_rng(13)
        cloud = labeled_cloud(rng, n=80, p=3, eps=0.15, shift=9.0)
        cfg = SgrConfig(epsilon=0.15, inner_rounds=64, s_max=30, c_stop=None,
                        eta_w_scale=0.5, eta_rho_scale=0.5)
        w, rep = run_sgr(cloud, cfg)
        assert rep.c_stop > 0.0
        assert rep.stop_reason in ("certificate", "fixed_point")
        assert rep.nu_exact
        assert rep.outlier_mass[-1] <= 0.02

    def test_history_bounded_by_s_max(self):
        rng = np.random.default_rng(14)
        cloud = labeled_cloud(rng, n=40, p=3, eps=0.2)
        cfg = SgrConfig(epsilon=0.2, inner_rounds=16, s_max=4, c_stop=0.0)
        _, rep = run_sgr(cloud, cfg)
        assert rep.iterations <= 4

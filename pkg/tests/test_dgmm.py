import numpy as np
import pytest

from sgrgmm.dgmm import (
    DgmmModel,
    MixtureParams,
    PrecomputedMoments,
    bell_cross,
    bell_model,
    cross_term,
    cross_terms,
    cumulant,
    em_fit,
    gradient_cloud,
    kmeans_pp_centers,
    mixture_errors,
    model_term,
    model_term_grad,
    order_weights,
    robust_objective,
)
from sgrgmm.errors import KMismatch
from sgrgmm.weights import uniform


def random_params(rng, d=4, k=2, r=2, noise=0.1, mu_scale=1.0, v_scale=0.7):
    pi = rng.dirichlet(np.ones(k) * 5)
    mu = rng.standard_normal((k, d)) * mu_scale
    v = [rng.standard_normal((d, r)) * v_scale for _ in range(k)]
    return MixtureParams(pi, mu, v, noise * np.eye(d))


class TestBellModel:
    def test_base_case(self):
        assert bell_model([])[0] == 1.0

    def test_order_two(self):
        k1, k2 = 0.7, 1.3
        table = bell_model([k1, k2])
        assert np.isclose(table[2], k1**2 + k2)

    def test_order_three(self):
        k1, k2, k3 = 0.5, 2.0, -0.3
        table = bell_model([k1, k2, k3])
        assert np.isclose(table[3], k1**3 + 3 * k1 * k2 + k3)

    def test_order_four(self):
        # moments of a distribution from its cumulants
        k1, k2, k3, k4 = 0.2, 1.1, 0.4, -0.6
        table = bell_model([k1, k2, k3, k4])
        expected = k1**4 + 6 * k1**2 * k2 + 4 * k1 * k3 + 3 * k2**2 + k4
        assert np.isclose(table[4], expected)

    def test_gaussian_moments_match_cross_recurrence(self):
        # with higher cumulants zero both recurrences give the same table
        a, b = 0.8, 1.7
        full = bell_model([a, b, 0.0, 0.0, 0.0])
        cross = bell_cross(a, b, 5)
        assert np.allclose(full, cross)


class TestBellCross:
    def test_bases(self):
        table = bell_cross(0.9, 2.0, 1)
        assert table[0] == 1.0 and table[1] == 0.9

    def test_order_two(self):
        a, b = 0.9, 2.0
        assert np.isclose(bell_cross(a, b, 2)[2], a**2 + b)

    def test_odd_vanishes_at_zero_mean(self):
        assert bell_cross(0.0, 3.0, 3)[3] == 0.0

    def test_scalar_gaussian_moments_mc(self):
        rng = np.random.default_rng(0)
        a, b = 1.2, 0.8
        draws = a + np.sqrt(b) * rng.standard_normal(400_000)
        table = bell_cross(a, b, 4)
        for k in range(1, 5):
            mc = (draws**k).mean()
            se = (draws**k).std() / np.sqrt(draws.size)
            assert abs(table[k] - mc) <= 4 * se

    def test_vectorized(self):
        a = np.array([0.5, -1.0])
        b = np.array([1.0, 2.0])
        table = bell_cross(a, b, 3)
        assert table.shape == (4, 2)
        for i in range(2):
            assert np.allclose(table[:, i], bell_cross(a[i], b[i], 3))


class TestCumulants:
    def test_first_order(self):
        rng = np.random.default_rng(1)
        p = random_params(rng)
        assert np.isclose(cumulant(p, 0, 1, 1), p.mu[1] @ p.mu[0])

    def test_second_order_zero_mean(self):
        rng = np.random.default_rng(2)
        p = random_params(rng, mu_scale=0.0)
        covs = p.noisy_covariances()
        assert np.isclose(cumulant(p, 0, 1, 2), np.trace(covs[0] @ covs[1]))

    def test_third_order_hand_value(self):
        # single component, mean e1, identity covariance: 3! * 1 = 6
        d = 3
        v = [np.eye(d)]
        p = MixtureParams([1.0], np.eye(d)[:1], v, np.zeros((d, d)))
        assert np.isclose(cumulant(p, 0, 0, 3), 6.0)

    def test_symmetry_in_pair(self):
        rng = np.random.default_rng(3)
        p = random_params(rng)
        for l in range(1, 5):
            assert np.isclose(cumulant(p, 0, 1, l), cumulant(p, 1, 0, l), rtol=1e-10)

    def test_mc_cumulant_order_two(self):
        # var(<Y_i, Y_j>) against a direct draw
        rng = np.random.default_rng(4)
        p = random_params(rng, d=3, k=2, r=2)
        covs = p.noisy_covariances()
        n = 400_000
        yi = p.mu[0] + rng.multivariate_normal(np.zeros(3), covs[0], size=n)
        yj = p.mu[1] + rng.multivariate_normal(np.zeros(3), covs[1], size=n)
        prods = np.sum(yi * yj, axis=1)
        se = prods.var() / np.sqrt(n) * 3
        assert abs(cumulant(p, 0, 1, 2) - prods.var()) <= 4 * prods.std() ** 2 / np.sqrt(n) + se


class TestModelTerm:
    def test_order_one_is_mean_norm(self):
        rng = np.random.default_rng(5)
        p = random_params(rng)
        mean = (p.pi[:, None] * p.mu).sum(axis=0)
        assert np.isclose(model_term(p, 1), mean @ mean)

    def test_standard_normal_order_two(self):
        d = 4
        p = MixtureParams([1.0], np.zeros((1, d)), [np.eye(d)], np.zeros((d, d)))
        assert np.isclose(model_term(p, 2), d)

    def test_odd_orders_vanish_at_zero_mean(self):
        rng = np.random.default_rng(6)
        p = random_params(rng, mu_scale=0.0)
        assert abs(model_term(p, 1)) <= 1e-12
        assert abs(model_term(p, 3)) <= 1e-9

    def test_monte_carlo_oracle(self):
        # phi_k = E <Y, Y'>^k for independent noisy mixture draws
        rng = np.random.default_rng(7)
        p = random_params(rng, d=3, k=2, r=2, noise=0.05)
        n = 500_000
        def draw():
            comp = rng.choice(p.k, size=n, p=p.pi)
            out = np.empty((n, p.d))
            for j in range(p.k):
                rows = comp == j
                m = int(rows.sum())
                out[rows] = (
                    p.mu[j]
                    + rng.standard_normal((m, p.v[j].shape[1])) @ p.v[j].T
                    + rng.multivariate_normal(np.zeros(p.d), p.sigma_xi, size=m)
                )
            return out
        ya, yb = draw(), draw()
        prods = np.sum(ya * yb, axis=1)
        for k in range(1, 5):
            vals = prods**k
            mc, se = vals.mean(), vals.std() / np.sqrt(n)
            assert abs(model_term(p, k) - mc) <= 4 * se


class TestCrossTerm:
    def test_order_one(self):
        rng = np.random.default_rng(8)
        p = random_params(rng)
        y = rng.standard_normal(p.d)
        expected = sum(p.pi[j] * (y @ p.mu[j]) for j in range(p.k))
        assert np.isclose(cross_term(p, 1, y), expected)

    def test_order_two(self):
        rng = np.random.default_rng(9)
        p = random_params(rng)
        y = rng.standard_normal(p.d)
        covs = p.noisy_covariances()
        expected = sum(
            p.pi[j] * ((y @ p.mu[j]) ** 2 + y @ covs[j] @ y) for j in range(p.k)
        )
        assert np.isclose(cross_term(p, 2, y), expected)

    def test_monte_carlo_oracle(self):
        # psi_k(y) = sum_j pi_j E <y, Z_j>^k with Z_j a noisy component draw
        rng = np.random.default_rng(10)
        p = random_params(rng, d=3, k=2)
        y = rng.standard_normal(3)
        covs = p.noisy_covariances()
        n = 500_000
        for k in range(1, 5):
            mc, var = 0.0, 0.0
            for j in range(p.k):
                z = p.mu[j] + rng.multivariate_normal(np.zeros(3), covs[j], size=n)
                vals = (z @ y) ** k
                mc += p.pi[j] * vals.mean()
                var += p.pi[j] ** 2 * vals.var() / n
            assert abs(cross_term(p, k, y) - mc) <= 4 * np.sqrt(var)


class TestGradients:
    def test_model_term_gradients_fd(self):
        rng = np.random.default_rng(11)
        h = 1e-6
        for trial in range(6):
            p = random_params(rng)
            k = int(rng.integers(1, 5))
            g_pi, g_mu, g_v = model_term_grad(p, k)
            # pi block: perturb one raw weight, renormalization handled by
            # comparing against the unnormalized quadratic form
            for j in range(p.k):
                pi_p, pi_m = p.pi.copy(), p.pi.copy()
                pi_p[j] += h
                pi_m[j] -= h
                up = _phi_raw(pi_p, p, k)
                dn = _phi_raw(pi_m, p, k)
                assert np.isclose((up - dn) / (2 * h), g_pi[j], rtol=1e-4, atol=1e-7)
            for j in range(p.k):
                for a in range(p.d):
                    mu_p, mu_m = p.mu.copy(), p.mu.copy()
                    mu_p[j, a] += h
                    mu_m[j, a] -= h
                    fd = (
                        model_term(MixtureParams(p.pi, mu_p, p.v, p.sigma_xi), k)
                        - model_term(MixtureParams(p.pi, mu_m, p.v, p.sigma_xi), k)
                    ) / (2 * h)
                    assert np.isclose(fd, g_mu[j, a], rtol=1e-4, atol=1e-6)
            j = int(rng.integers(0, p.k))
            for a in range(p.d):
                for b in range(p.v[j].shape[1]):
                    vp = [x.copy() for x in p.v]
                    vm = [x.copy() for x in p.v]
                    vp[j][a, b] += h
                    vm[j][a, b] -= h
                    fd = (
                        model_term(MixtureParams(p.pi, p.mu, vp, p.sigma_xi), k)
                        - model_term(MixtureParams(p.pi, p.mu, vm, p.sigma_xi), k)
                    ) / (2 * h)
                    assert np.isclose(fd, g_v[j][a, b], rtol=1e-4, atol=1e-6)

    def test_cross_term_cloud_fd(self):
        rng = np.random.default_rng(12)
        h = 1e-6
        p = random_params(rng)
        y = rng.standard_normal((3, p.d))
        for k in range(1, 5):
            cloud = gradient_cloud(p, k, y)
            flat = np.concatenate([p.pi, p.mu.ravel()] + [v.ravel() for v in p.v])
            for n in range(3):
                fd = np.empty(flat.size)
                for idx in range(flat.size):
                    up, dn = flat.copy(), flat.copy()
                    up[idx] += h
                    dn[idx] -= h
                    fd[idx] = (
                        _psi_at(up, p, k, y[n]) - _psi_at(dn, p, k, y[n])
                    ) / (2 * h)
                rel = np.abs(cloud[n] - fd) / np.maximum(1.0, np.abs(fd))
                assert rel.max() <= 1e-5

    def test_k1_cloud_structure(self):
        rng = np.random.default_rng(13)
        p = random_params(rng)
        y = rng.standard_normal((4, p.d))
        cloud = gradient_cloud(p, 1, y)
        k, d = p.k, p.d
        # mean block is pi_h * y, covariance block is zero at order 1
        for j in range(k):
            assert np.allclose(cloud[:, k + j * d : k + (j + 1) * d], p.pi[j] * y)
        assert np.allclose(cloud[:, k + k * d :], 0.0)

    def test_gauge_invariance(self):
        # replacing V by V @ O leaves all moment quantities unchanged
        rng = np.random.default_rng(14)
        p = random_params(rng)
        o, _ = np.linalg.qr(rng.standard_normal((2, 2)))
        v_rot = [vj @ o for vj in p.v]
        p_rot = MixtureParams(p.pi, p.mu, v_rot, p.sigma_xi)
        y = rng.standard_normal((5, p.d))
        for k in range(1, 5):
            assert abs(model_term(p, k) - model_term(p_rot, k)) <= 1e-10 * max(
                1, abs(model_term(p, k))
            )
            assert np.allclose(cross_terms(p, k, y), cross_terms(p_rot, k, y),
                               rtol=1e-10)

    def test_softmax_chain_fd(self):
        rng = np.random.default_rng(15)
        y = rng.standard_normal((30, 4)) * 1.5
        model = DgmmModel(y, 2, 2, 3, 0.1 * np.eye(4))
        p = random_params(rng)
        theta = model.theta_of(p)
        w = [uniform(30, 0.0)] * 3
        ow = model.order_weights(theta, w)
        grad = model.robust_gradient(theta, w, ow)
        h = 1e-6
        fd = np.empty_like(theta)
        for i in range(theta.size):
            up, dn = theta.copy(), theta.copy()
            up[i] += h
            dn[i] -= h
            fd[i] = (
                model.robust_objective(up, w, ow) - model.robust_objective(dn, w, ow)
            ) / (2 * h)
        assert np.max(np.abs(grad - fd) / np.maximum(1.0, np.abs(fd))) <= 1e-6


def _phi_raw(pi_raw, p, k):
    """Model term with unnormalized weights (for pi-block differencing)."""
    from sgrgmm.dgmm import _pair_tables

    _, kappas = _pair_tables(p, k)
    total = 0.0
    for i in range(p.k):
        for j in range(p.k):
            total += pi_raw[i] * pi_raw[j] * bell_model(kappas[i, j])[k]
    return total


def _psi_at(flat, p, k, y):
    kk, d = p.k, p.d
    pi = flat[:kk]
    mu = flat[kk : kk + kk * d].reshape(kk, d)
    offset = kk + kk * d
    total = 0.0
    for j in range(kk):
        r = p.v[j].shape[1]
        vj = flat[offset : offset + d * r].reshape(d, r)
        offset += d * r
        cov = vj @ vj.T + p.sigma_xi
        total += pi[j] * bell_cross(y @ mu[j], y @ cov @ y, k)[k]
    return total


class TestPrecomputedMoments:
    def test_row_sums_and_diag(self):
        rng = np.random.default_rng(16)
        y = rng.standard_normal((40, 3))
        pre = PrecomputedMoments(y, 3)
        gram = y @ y.T
        for k in range(1, 4):
            assert np.allclose(pre.row_sums[k], (gram**k).sum(axis=1))
            assert np.allclose(pre.diag[k], np.diag(gram**k))

    def test_quad_exact_vs_factorized(self):
        rng = np.random.default_rng(17)
        y = rng.standard_normal((25, 3))
        exact = PrecomputedMoments(y, 4)
        fact = PrecomputedMoments(y, 4, exact_limit=0)
        assert not fact.exact
        for k in range(1, 5):
            a = rng.uniform(0, 1, 25)
            b = rng.uniform(0, 1, 25)
            assert np.isclose(exact.quad(k, a, b), fact.quad(k, a, b),
                              rtol=1e-9)

    def test_spot_check(self):
        rng = np.random.default_rng(18)
        y = rng.standard_normal((30, 4))
        pre = PrecomputedMoments(y, 4)
        assert pre.spot_check(np.random.default_rng(0)) <= 1e-9


class TestOrderWeights:
    def test_matches_double_loop(self):
        rng = np.random.default_rng(19)
        n, d, L = 12, 3, 3
        y = rng.standard_normal((n, d))
        p = random_params(rng, d=d, k=1, r=2)
        pre = PrecomputedMoments(y, L)
        w = [uniform(n, 0.0).values for _ in range(L)]
        ours, flagged = order_weights(p, y, w, pre)
        assert not flagged
        phis = [model_term(p, k) for k in range(1, L + 1)]
        psis = [cross_terms(p, k, y) for k in range(1, L + 1)]
        gram = y @ y.T
        for k in range(1, L + 1):
            ck = gram**k
            num = sum(
                w[k - 1][i] ** 2 * (phis[k - 1] - 2 * psis[k - 1][i] + ck[i, i])
                for i in range(n)
            )
            den = 0.0
            for kp in range(1, L + 1):
                ckp = gram**kp
                for i in range(n):
                    for j in range(n):
                        den += (
                            w[k - 1][i] * w[k - 1][j]
                            * w[kp - 1][i] * w[kp - 1][j]
                            * (phis[k - 1] - psis[k - 1][i] - psis[k - 1][j] + ck[i, j])
                            * (phis[kp - 1] - psis[kp - 1][i] - psis[kp - 1][j] + ckp[i, j])
                        )
            assert np.isclose(ours[k - 1], num / den, rtol=1e-12)

    def test_zero_residual_guarded(self):
        y = np.zeros((4, 2))
        p = MixtureParams([1.0], np.zeros((1, 2)), [np.zeros((2, 1))],
                          np.zeros((2, 2)))
        pre = PrecomputedMoments(y, 2)
        w = [uniform(4, 0.0).values] * 2
        ow, flagged = order_weights(p, y, w, pre)
        assert flagged
        assert np.allclose(ow, 0.5)

    def test_exact_vs_factorized_path(self):
        rng = np.random.default_rng(20)
        n, d, L = 15, 3, 3
        y = rng.standard_normal((n, d))
        p = random_params(rng, d=d)
        w = [uniform(n, 0.0).values for _ in range(L)]
        a, fa = order_weights(p, y, w, PrecomputedMoments(y, L))
        b, fb = order_weights(p, y, w, PrecomputedMoments(y, L, exact_limit=0))
        assert np.allclose(a, b, rtol=1e-9)


class TestRobustObjective:
    def test_single_point_squared_distance(self):
        # L = 1, one observation: Q = o1 * ||mu - y||^2
        y = np.array([[1.0, 2.0]])
        p = MixtureParams([1.0], np.array([[0.5, 0.5]]), [np.zeros((2, 1))],
                          np.zeros((2, 2)))
        pre = PrecomputedMoments(y, 1)
        w = [np.array([1.0])]
        q = robust_objective(p, y, w, [2.0], pre)
        assert np.isclose(q, 2.0 * np.sum((p.mu[0] - y[0]) ** 2))

    def test_zero_order_weights(self):
        rng = np.random.default_rng(21)
        y = rng.standard_normal((10, 3))
        p = random_params(rng, d=3)
        pre = PrecomputedMoments(y, 2)
        w = [uniform(10, 0.0).values] * 2
        assert robust_objective(p, y, w, [0.0, 0.0], pre) == 0.0


class TestEmFit:
    def test_single_component_mean(self):
        rng = np.random.default_rng(22)
        y = 3.0 + rng.standard_normal((500, 2))
        params, report = em_fit(y, 1, rng=np.random.default_rng(0))
        assert np.linalg.norm(params.mu[0] - y.mean(axis=0)) <= 1e-6

    def test_loglik_monotone(self):
        rng = np.random.default_rng(23)
        y = np.vstack([rng.standard_normal((150, 2)), 6 + rng.standard_normal((150, 2))])
        _, report = em_fit(y, 2, rng=np.random.default_rng(1))
        ll = [-r["objective"] for r in report.rows]
        assert all(b >= a - 1e-10 for a, b in zip(ll, ll[1:]))

    def test_two_cluster_weights(self):
        rng = np.random.default_rng(24)
        y = np.vstack(
            [rng.standard_normal((1000, 2)), [12.0, 0.0] + rng.standard_normal((1000, 2))]
        )
        params, _ = em_fit(y, 2, rng=np.random.default_rng(2))
        assert np.max(np.abs(np.sort(params.pi) - 0.5)) <= 0.05


class TestMixtureErrors:
    def test_exact_match(self):
        rng = np.random.default_rng(25)
        p = random_params(rng)
        errs = mixture_errors(p, p)
        assert errs["err_pi"] == 0.0
        assert errs["err_mu"] == 0.0
        assert errs["err_sigma"] == 0.0
        assert errs["permutation"] == (0, 1)

    def test_swapped_components(self):
        rng = np.random.default_rng(26)
        p = random_params(rng)
        swapped = MixtureParams(p.pi[::-1], p.mu[::-1], [p.v[1], p.v[0]],
                                p.sigma_xi)
        errs = mixture_errors(swapped, p)
        assert errs["err_sigma"] <= 1e-12
        assert errs["permutation"] == (1, 0)

    def test_doubled_covariance(self):
        rng = np.random.default_rng(27)
        p = random_params(rng, k=1)
        doubled = MixtureParams(p.pi, p.mu, [np.sqrt(2.0) * p.v[0]], p.sigma_xi)
        errs = mixture_errors(doubled, p)
        assert np.isclose(errs["err_sigma"], 1.0)

    def test_k_mismatch(self):
        rng = np.random.default_rng(28)
        with pytest.raises(KMismatch):
            mixture_errors(random_params(rng, k=1), random_params(rng, k=2))


class TestSerialization:
    def test_round_trip(self):
        rng = np.random.default_rng(29)
        p = random_params(rng)
        q = MixtureParams.from_text(p.to_text())
        assert np.allclose(p.pi, q.pi)
        assert np.allclose(p.mu, q.mu)
        for a, b in zip(p.v, q.v):
            assert np.allclose(a, b)
        assert np.allclose(p.sigma_xi, q.sigma_xi)


def test_kmeans_pp_deterministic():
    rng = np.random.default_rng(30)
    y = rng.standard_normal((100, 3))
    c1 = kmeans_pp_centers(y, 3, np.random.default_rng(7))
    c2 = kmeans_pp_centers(y, 3, np.random.default_rng(7))
    assert np.array_equal(c1, c2)

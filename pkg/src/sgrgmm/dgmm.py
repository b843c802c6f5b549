"""Low-rank Gaussian mixture estimation by reweighted moment matching.

The moment model compresses order-k moment matching into inner-product
powers <y_n, y_n'>^k.  Model terms (parameter-only) and per-observation
cross terms both evaluate through Bell-polynomial recurrences over
Gaussian cumulants, and every gradient is analytic.  Includes the
non-robust baselines (plain and noise-aware moment fits, likelihood EM)
and permutation-matched error metrics.
"""

import itertools
import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from .engine import DriverConfig, FitReport, MomentModel, fit
from .errors import KMismatch, NonFiniteInput
from .sgr import SgrConfig
from .weights import WeightVector

__all__ = [
    "MixtureParams",
    "PrecomputedMoments",
    "DgmmConfig",
    "DgmmModel",
    "bell_model",
    "bell_cross",
    "cumulant",
    "model_term",
    "cross_term",
    "model_term_grad",
    "cross_term_grad",
    "order_weights",
    "robust_objective",
    "robust_fit",
    "naive_fit",
    "noise_aware_fit",
    "em_fit",
    "mixture_errors",
    "kmeans_pp_centers",
]

_EXACT_PAIR_LIMIT = 2000


# ---------------------------------------------------------------------------
# parameters


@dataclass
class MixtureParams:
    """Mixing weights, centers, covariance factors, and known noise covariance.

    Component j has signal covariance V_j V_j'; observations additionally
    carry additive noise with covariance ``sigma_xi``.
    """

    pi: np.ndarray
    mu: np.ndarray
    v: list
    sigma_xi: np.ndarray

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=float)
        self.mu = np.atleast_2d(np.asarray(self.mu, dtype=float))
        self.v = [np.atleast_2d(np.asarray(vj, dtype=float)) for vj in self.v]
        self.sigma_xi = np.asarray(self.sigma_xi, dtype=float)
        if abs(self.pi.sum() - 1.0) > 1e-10 or self.pi.min() <= 0:
            raise NonFiniteInput("mixing weights must be positive and sum to 1")
        if np.linalg.eigvalsh((self.sigma_xi + self.sigma_xi.T) / 2).min() < -1e-10:
            raise NonFiniteInput("noise covariance must be PSD")

    @property
    def k(self):
        return self.pi.size

    @property
    def d(self):
        return self.mu.shape[1]

    @property
    def ranks(self):
        return [vj.shape[1] for vj in self.v]

    def signal_covariances(self):
        return [vj @ vj.T for vj in self.v]

    def noisy_covariances(self):
        return [vj @ vj.T + self.sigma_xi for vj in self.v]

    def to_text(self):
        """Structured text serialization, round-trippable via from_text."""
        doc = {
            "k": int(self.k),
            "d": int(self.d),
            "ranks": [int(r) for r in self.ranks],
            "pi": self.pi.tolist(),
            "mu": self.mu.tolist(),
            "v": [vj.tolist() for vj in self.v],
            "sigma_xi": self.sigma_xi.tolist(),
        }
        return json.dumps(doc, indent=1)

    @staticmethod
    def from_text(text):
        doc = json.loads(text)
        return MixtureParams(
            pi=np.array(doc["pi"]),
            mu=np.array(doc["mu"]),
            v=[np.array(vj) for vj in doc["v"]],
            sigma_xi=np.array(doc["sigma_xi"]),
        )


# ---------------------------------------------------------------------------
# Bell recurrences


def bell_model(cumulants):
    """Complete Bell polynomials B_0..B_k from cumulants kappa_1..kappa_k.

    B_k = sum_{l=0}^{k-1} C(k-1, l) B_{k-l-1} kappa_{l+1}, B_0 = 1.
    Returns the whole table so gradient code can reuse lower orders.
    """
    kappas = np.asarray(cumulants, dtype=float)
    k = kappas.size
    table = np.empty(k + 1)
    table[0] = 1.0
    for m in range(1, k + 1):
        acc = 0.0
        for l in range(m):
            acc += math.comb(m - 1, l) * table[m - l - 1] * kappas[l]
        table[m] = acc
    return table


def bell_cross(a, b, k):
    """Moment table of a scalar Gaussian with mean a and variance b.

    B_0 = 1, B_1 = a, B_m = B_{m-1} a + (m-1) B_{m-2} b; higher cumulants
    vanish.  ``a`` and ``b`` may be arrays (vectorized over observations);
    returns an array of shape (k+1,) + shape(a).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    table = np.empty((k + 1,) + a.shape)
    table[0] = 1.0
    if k >= 1:
        table[1] = a
    for m in range(2, k + 1):
        table[m] = table[m - 1] * a + (m - 1) * table[m - 2] * b
    return table


# ---------------------------------------------------------------------------
# cumulants of component inner products


class _PairPowers:
    """Memoized alternating products (C_i C_j)^m for one component pair."""

    def __init__(self, c_i, c_j):
        self.c_i = c_i
        self.c_j = c_j
        self._powers = [np.eye(c_i.shape[0])]

    def power(self, m):
        while len(self._powers) <= m:
            self._powers.append(self._powers[-1] @ (self.c_i @ self.c_j))
        return self._powers[m]


def _cumulant_from_powers(powers, mu_i, mu_j, l):
    if l == 1:
        return float(mu_j @ mu_i)
    if l % 2 == 0:
        m = (l - 2) // 2
        trace = math.factorial(l - 1) * float(np.trace(powers.power(l // 2)))
        quad_i = 0.5 * math.factorial(l) * float(
            mu_i @ powers.c_j @ powers.power(m) @ mu_i
        )
        quad_j = 0.5 * math.factorial(l) * float(
            mu_j @ powers.power(m) @ powers.c_i @ mu_j
        )
        return trace + quad_i + quad_j
    m = (l - 1) // 2
    return math.factorial(l) * float(mu_j @ powers.power(m) @ mu_i)


def cumulant(params: MixtureParams, i, j, l):
    """Order-l cumulant of <Y_i, Y_j> for independent noisy components i, j."""
    covs = params.noisy_covariances()
    powers = _PairPowers(covs[i], covs[j])
    return _cumulant_from_powers(powers, params.mu[i], params.mu[j], l)


def _pair_tables(params: MixtureParams, k):
    """Per-pair power memos and cumulant vectors kappa_1..kappa_k."""
    covs = params.noisy_covariances()
    n_comp = params.k
    powers = {}
    kappas = {}
    for i in range(n_comp):
        for j in range(n_comp):
            pw = _PairPowers(covs[i], covs[j])
            powers[i, j] = pw
            kappas[i, j] = np.array(
                [
                    _cumulant_from_powers(pw, params.mu[i], params.mu[j], l)
                    for l in range(1, k + 1)
                ]
            )
    return powers, kappas


def model_term(params: MixtureParams, k):
    """phi_k = sum_ij pi_i pi_j B_k(kappa_ij), the parameter-only moment."""
    _, kappas = _pair_tables(params, k)
    total = 0.0
    for i in range(params.k):
        for j in range(params.k):
            total += params.pi[i] * params.pi[j] * bell_model(kappas[i, j])[k]
    return float(total)


def _cross_inputs(params: MixtureParams, y_mat):
    """Per-component (a, b) arrays: a = Y mu_j, b = row-wise y' C_j y."""
    covs = params.noisy_covariances()
    a_list, b_list = [], []
    for j in range(params.k):
        a_list.append(y_mat @ params.mu[j])
        b_list.append(np.sum((y_mat @ covs[j]) * y_mat, axis=1))
    return a_list, b_list


def cross_terms(params: MixtureParams, k, y_mat):
    """psi_k at every observation row of y_mat, shape (N,)."""
    y_mat = np.atleast_2d(np.asarray(y_mat, dtype=float))
    a_list, b_list = _cross_inputs(params, y_mat)
    out = np.zeros(y_mat.shape[0])
    for j in range(params.k):
        out += params.pi[j] * bell_cross(a_list[j], b_list[j], k)[k]
    return out


def cross_term(params: MixtureParams, k, y):
    """psi_k at a single observation."""
    return float(cross_terms(params, k, np.atleast_2d(y))[0])


def _grad_kappa_mu(powers, mu_i, mu_j, l):
    """d kappa_l / d mu_j with i fixed in the first slot."""
    if l == 1:
        return mu_i.copy()
    if l % 2 == 0:
        m = (l - 2) // 2
        return math.factorial(l) * (powers.power(m) @ (powers.c_i @ mu_j))
    m = (l - 1) // 2
    return math.factorial(l) * (powers.power(m) @ mu_i)


def _grad_kappa_v(powers, mu_i, mu_j, v_j, l):
    """d kappa_l / d V_j with i fixed in the first slot.

    Every occurrence of the second-slot covariance in the cumulant word
    contributes one telescoping power-sum term; the quadratic-in-mu_i
    piece of even orders has l/2 occurrences, so its sum runs to (l-2)/2
    inclusive.
    """
    if l == 1:
        return np.zeros_like(v_j)
    fact = math.factorial(l)
    c_i = powers.c_i
    ci_mu_j = c_i @ mu_j
    if l % 2 == 0:
        m = (l - 2) // 2
        out = fact * (powers.power(m) @ c_i @ v_j)
        for p in range(m + 1):
            left = powers.power(p) @ mu_i
            right = powers.power(m - p) @ mu_i
            out += fact * np.outer(left, right @ v_j)
        for p in range(m):
            left = powers.power(p) @ ci_mu_j
            right = powers.power(m - 1 - p) @ ci_mu_j
            out += fact * np.outer(left, right @ v_j)
        return out
    m = (l - 1) // 2
    out = np.zeros_like(v_j)
    for p in range(m):
        out += fact * np.outer(
            powers.power(p) @ ci_mu_j, (powers.power(m - 1 - p) @ mu_i) @ v_j
        )
        out += fact * np.outer(
            powers.power(p) @ mu_i, (powers.power(m - 1 - p) @ ci_mu_j) @ v_j
        )
    return out


def model_term_grad(params: MixtureParams, k):
    """Analytic gradient blocks of phi_k: (d pi (K,), d mu (K, d), d V list).

    The pair symmetry kappa_ij = kappa_ji folds both occurrences of
    component j into a factor of two.
    """
    n_comp = params.k
    powers, kappas = _pair_tables(params, k)
    bells = {key: bell_model(vec) for key, vec in kappas.items()}

    d_pi = np.zeros(n_comp)
    d_mu = np.zeros_like(params.mu)
    d_v = [np.zeros_like(vj) for vj in params.v]
    for j in range(n_comp):
        for i in range(n_comp):
            table = bells[i, j]
            d_pi[j] += 2.0 * params.pi[i] * table[k]
            coeff = 2.0 * params.pi[i] * params.pi[j]
            for l in range(1, k + 1):
                weight = coeff * math.comb(k, l) * table[k - l]
                if weight == 0.0:
                    continue
                d_mu[j] += weight * _grad_kappa_mu(
                    powers[i, j], params.mu[i], params.mu[j], l
                )
                d_v[j] += weight * _grad_kappa_v(
                    powers[i, j], params.mu[i], params.mu[j], params.v[j], l
                )
    return d_pi, d_mu, d_v


def cross_term_grad(params: MixtureParams, k, y):
    """Per-observation gradient of psi_k in (pi, mu, vec V) order."""
    return gradient_cloud(params, k, np.atleast_2d(y))[0]


def gradient_cloud(params: MixtureParams, k, y_mat):
    """(N, p) stack of per-observation cross-term gradients.

    Blocks: d pi_h = B_k(a_h, b_h); d mu_h = pi_h k B_{k-1} y;
    d V_h = pi_h k (k-1) B_{k-2} (y y' V_h); the factor k(k-1) kills the
    covariance block at k = 1 and the mean block prefactor k never
    vanishes for k >= 1.
    """
    y_mat = np.atleast_2d(np.asarray(y_mat, dtype=float))
    n, d = y_mat.shape
    n_comp = params.k
    a_list, b_list = _cross_inputs(params, y_mat)
    blocks = [np.empty((n, n_comp))]
    mu_block = np.empty((n, n_comp * d))
    v_cols = []
    for j in range(n_comp):
        table = bell_cross(a_list[j], b_list[j], k)
        blocks[0][:, j] = table[k]
        if k >= 1:
            mu_block[:, j * d : (j + 1) * d] = (
                params.pi[j] * k * table[k - 1][:, None] * y_mat
            )
        else:
            mu_block[:, j * d : (j + 1) * d] = 0.0
        r_j = params.v[j].shape[1]
        if k >= 2:
            yv = y_mat @ params.v[j]
            outer = y_mat[:, :, None] * yv[:, None, :]
            v_cols.append(
                (params.pi[j] * k * (k - 1) * table[k - 2])[:, None]
                * outer.reshape(n, d * r_j)
            )
        else:
            v_cols.append(np.zeros((n, d * r_j)))
    return np.hstack(blocks + [mu_block] + v_cols)


# ---------------------------------------------------------------------------
# precomputed pairwise moment sums


class PrecomputedMoments:
    """Pairwise inner-product powers C_{k,n,n'} = <y_n, y_n'>^k.

    Stores the row sums and the diagonal for every order.  Quadratic forms
    w' C_k w use the exact N x N matrices up to N = 2000 and a factorized
    tensor-moment expansion beyond (sum_n a_n y_n^{x m} contracted against
    itself), so the O(N^2) cost never hides behind large inputs.
    """

    def __init__(self, y_mat, n_orders, exact_limit=_EXACT_PAIR_LIMIT):
        self.y = np.atleast_2d(np.asarray(y_mat, dtype=float))
        self.n_orders = int(n_orders)
        self.n = self.y.shape[0]
        self.exact = self.n <= exact_limit
        self.row_sums = {}
        self.diag = {}
        self.full = {}
        if self.exact:
            gram = self.y @ self.y.T
            power = np.ones_like(gram)
            for k in range(1, self.n_orders + 1):
                power = power * gram
                self.full[k] = power
                self.row_sums[k] = power.sum(axis=1)
                self.diag[k] = np.diag(power).copy()
        else:
            norms2 = np.sum(self.y * self.y, axis=1)
            for k in range(1, self.n_orders + 1):
                self.diag[k] = norms2**k
                self.row_sums[k] = self._matvec_ones(k)

    def _tensor_moment(self, a, m):
        """sum_n a_n y_n^{tensor m}, flattened; m = 0 gives sum(a)."""
        if m == 0:
            return np.array([a.sum()])
        out = a[:, None] * self.y
        for _ in range(m - 1):
            out = (out[:, :, None] * self.y[:, None, :]).reshape(self.n, -1)
        return out.sum(axis=0)

    def _matvec_ones(self, k):
        ones = np.ones(self.n)
        t = self._tensor_moment(ones, k)
        per_row = self.y.copy()
        rows = per_row
        for _ in range(k - 1):
            rows = (rows[:, :, None] * self.y[:, None, :]).reshape(self.n, -1)
        return rows @ t

    def quad(self, k, a, b=None):
        """sum_{n,n'} a_n b_n' C_{k,n,n'} (b defaults to a)."""
        b = a if b is None else b
        if self.exact:
            return float(a @ self.full[k] @ b)
        ta = self._tensor_moment(np.asarray(a, dtype=float), k)
        tb = ta if b is a else self._tensor_moment(np.asarray(b, dtype=float), k)
        return float(ta @ tb)

    def spot_check(self, rng, n_checks=10):
        """Recompute random (k, n) row sums directly; max relative error."""
        worst = 0.0
        for _ in range(n_checks):
            k = int(rng.integers(1, self.n_orders + 1))
            n = int(rng.integers(0, self.n))
            direct = float(np.sum((self.y @ self.y[n]) ** k))
            stored = float(self.row_sums[k][n])
            worst = max(worst, abs(direct - stored) / max(1.0, abs(direct)))
        return worst


def order_weights(params: MixtureParams, y_mat, weights, precomp: PrecomputedMoments):
    """Data-driven diagonal weights combining the moment orders.

    Ratio of the weighted diagonal residual quadratic to the full weighted
    residual cross-quadratic.  A near-zero denominator (all residuals
    vanish) falls back to 1/L with a flag.
    """
    y_mat = np.atleast_2d(np.asarray(y_mat, dtype=float))
    n_orders = precomp.n_orders
    w = [
        wk.values if isinstance(wk, WeightVector) else np.asarray(wk, dtype=float)
        for wk in weights
    ]
    phis = [model_term(params, k) for k in range(1, n_orders + 1)]
    psis = [cross_terms(params, k, y_mat) for k in range(1, n_orders + 1)]

    out = np.empty(n_orders)
    flagged = []
    if precomp.exact:
        resid = {
            k: phis[k - 1] - psis[k - 1][:, None] - psis[k - 1][None, :] + precomp.full[k]
            for k in range(1, n_orders + 1)
        }
    for k in range(1, n_orders + 1):
        wk = w[k - 1]
        num = float(
            np.sum(wk**2 * (phis[k - 1] - 2.0 * psis[k - 1] + precomp.diag[k]))
        )
        den = 0.0
        for kp in range(1, n_orders + 1):
            pair_w = wk * w[kp - 1]
            if precomp.exact:
                den += float(pair_w @ (resid[k] * resid[kp]) @ pair_w)
            else:
                den += _factorized_pair_quadratic(
                    precomp, pair_w, phis, psis, k, kp
                )
        if abs(den) < 1e-14:
            out[k - 1] = 1.0 / n_orders
            flagged.append(k)
        else:
            out[k - 1] = num / den
    return out, flagged


def _factorized_pair_quadratic(precomp, u, phis, psis, k, kp):
    """sum_{n,n'} u_n u_n' R_k(n,n') R_kp(n,n') without the N x N matrices.

    R_k(n,n') = f_k(n) + f_k(n') + C_k(n,n') with f_k = phi_k/2 - psi_k;
    the nine cross products separate into tensor-moment contractions.
    """
    f_k = 0.5 * phis[k - 1] - psis[k - 1]
    f_kp = 0.5 * phis[kp - 1] - psis[kp - 1]
    su = u.sum()
    s_fk = float(u @ f_k)
    s_fkp = float(u @ f_kp)
    s_ff = float(u @ (f_k * f_kp))
    total = 2.0 * s_ff * su + 2.0 * s_fk * s_fkp
    total += precomp.quad(k + kp, u, u)
    total += precomp.quad(kp, u * f_k, u) + precomp.quad(kp, u, u * f_k)
    total += precomp.quad(k, u * f_kp, u) + precomp.quad(k, u, u * f_kp)
    return total


# ---------------------------------------------------------------------------
# objective and gradient


def robust_objective(params: MixtureParams, y_mat, weights, order_w, precomp):
    """Q = sum_k o_k (phi_k - 2 sum_n w_n psi_k(y_n) + w' C_k w)."""
    y_mat = np.atleast_2d(np.asarray(y_mat, dtype=float))
    w = [
        wk.values if isinstance(wk, WeightVector) else np.asarray(wk, dtype=float)
        for wk in weights
    ]
    total = 0.0
    for k in range(1, precomp.n_orders + 1):
        ok = order_w[k - 1]
        if ok == 0.0:
            continue
        phi = model_term(params, k)
        psi = cross_terms(params, k, y_mat)
        total += ok * (phi - 2.0 * float(w[k - 1] @ psi) + precomp.quad(k, w[k - 1]))
    return float(total)


def robust_gradient_blocks(params: MixtureParams, y_mat, weights, order_w):
    """Gradient of Q in constrained blocks; the frozen pairwise term drops."""
    y_mat = np.atleast_2d(np.asarray(y_mat, dtype=float))
    w = [
        wk.values if isinstance(wk, WeightVector) else np.asarray(wk, dtype=float)
        for wk in weights
    ]
    d_pi = np.zeros(params.k)
    d_mu = np.zeros_like(params.mu)
    d_v = [np.zeros_like(vj) for vj in params.v]
    n_orders = len(order_w)
    for k in range(1, n_orders + 1):
        ok = order_w[k - 1]
        if ok == 0.0:
            continue
        g_pi, g_mu, g_v = model_term_grad(params, k)
        cloud = gradient_cloud(params, k, y_mat)
        pooled = cloud.T @ w[k - 1]
        c_pi, c_mu, c_v = _split_cloud_vector(pooled, params)
        d_pi += ok * (g_pi - 2.0 * c_pi)
        d_mu += ok * (g_mu - 2.0 * c_mu)
        for j in range(params.k):
            d_v[j] += ok * (g_v[j] - 2.0 * c_v[j])
    return d_pi, d_mu, d_v


def _split_cloud_vector(vec, params: MixtureParams):
    k, d = params.k, params.d
    pi_part = vec[:k]
    mu_part = vec[k : k + k * d].reshape(k, d)
    v_parts = []
    offset = k + k * d
    for j in range(k):
        r_j = params.v[j].shape[1]
        v_parts.append(vec[offset : offset + d * r_j].reshape(d, r_j))
        offset += d * r_j
    return pi_part, mu_part, v_parts


# ---------------------------------------------------------------------------
# unconstrained parameterization


def softmax(logits):
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


def pack_theta(logits, mu, v_list):
    return np.concatenate([np.asarray(logits, dtype=float).ravel(),
                           np.asarray(mu, dtype=float).ravel()]
                          + [np.asarray(vj, dtype=float).ravel() for vj in v_list])


def unpack_theta(theta, k, d, ranks):
    logits = theta[:k]
    mu = theta[k : k + k * d].reshape(k, d)
    v_list = []
    offset = k + k * d
    for r_j in ranks:
        v_list.append(theta[offset : offset + d * r_j].reshape(d, r_j))
        offset += d * r_j
    return logits, mu, v_list


# ---------------------------------------------------------------------------
# the moment model consumed by the estimation driver


@dataclass
class DgmmConfig:
    """Configuration of one mixture fit."""

    n_components: int
    rank: int
    n_orders: int = 4
    epsilon: float = 0.0
    t_gmm: int = 2
    i_lbfgs: int = 100
    i_interval: int = 10
    i_min: int = 3
    use_stabilization_gate: bool = True
    sgr_rounds: int = 64
    sgr_outer: int = 20
    sgr_c_stop: Optional[float] = None
    sgr_eta_scale: float = 0.5
    init: str = "kmeanspp"
    grad_tol: float = 1e-8

    def driver(self, reweighter):
        return DriverConfig(
            sgr=SgrConfig(
                epsilon=self.epsilon,
                inner_rounds=self.sgr_rounds,
                s_max=self.sgr_outer,
                c_stop=self.sgr_c_stop,
                eta_w_scale=self.sgr_eta_scale,
                eta_rho_scale=self.sgr_eta_scale,
                restart="warm_start",
            ),
            t_gmm=self.t_gmm,
            i_lbfgs=self.i_lbfgs,
            i_interval=self.i_interval,
            i_min=self.i_min,
            use_stabilization_gate=self.use_stabilization_gate,
            reweighter=reweighter,
            grad_tol=self.grad_tol,
        )


class DgmmModel(MomentModel):
    """Moment model over observed data for the estimation driver.

    Parameters travel through the driver as one unconstrained vector
    (logits through a softmax, centers and covariance factors verbatim);
    the per-observation gradient clouds handed to the reweighting live in
    the constrained (pi, mu, vec V) coordinates.
    """

    def __init__(self, y_mat, n_components, rank, n_orders, sigma_xi,
                 outlier_mask=None):
        self.y = np.atleast_2d(np.asarray(y_mat, dtype=float))
        self.n, self.d = self.y.shape
        self.k_comp = int(n_components)
        self.ranks = [int(rank)] * self.k_comp
        self.n_orders = int(n_orders)
        self.sigma_xi = (
            np.zeros((self.d, self.d)) if sigma_xi is None
            else np.asarray(sigma_xi, dtype=float)
        )
        self.precomp = PrecomputedMoments(self.y, self.n_orders)
        self._outlier_mask = outlier_mask
        self.order_weight_flags = []

    @property
    def n_obs(self):
        return self.n

    def cloud_dim(self):
        return self.k_comp + self.k_comp * self.d + sum(self.d * r for r in self.ranks)

    def params_of(self, theta):
        logits, mu, v_list = unpack_theta(theta, self.k_comp, self.d, self.ranks)
        # wild line-search trial points can underflow the softmax to an
        # exact zero; clamping the centered logits keeps every mixing
        # weight strictly positive without affecting any reachable optimum
        logits = np.clip(logits - logits.mean(), -200.0, 200.0)
        return MixtureParams(softmax(logits), mu, v_list, self.sigma_xi)

    def theta_of(self, params: MixtureParams):
        logits = np.log(params.pi)
        logits = logits - logits.mean()
        return pack_theta(logits, params.mu, params.v)

    def gradient_cloud(self, theta, k):
        return gradient_cloud(self.params_of(theta), k, self.y)

    def robust_objective(self, theta, weights, order_w):
        return robust_objective(self.params_of(theta), self.y, weights, order_w,
                                self.precomp)

    def robust_gradient(self, theta, weights, order_w):
        params = self.params_of(theta)
        d_pi, d_mu, d_v = robust_gradient_blocks(params, self.y, weights, order_w)
        # chain rule through the softmax: g_logit = pi * (g_pi - <pi, g_pi>)
        g_logits = params.pi * (d_pi - float(params.pi @ d_pi))
        return pack_theta(g_logits, d_mu, d_v)

    def order_weights(self, theta, weights):
        out, flagged = order_weights(self.params_of(theta), self.y, weights,
                                     self.precomp)
        if flagged:
            self.order_weight_flags.append(flagged)
        return out

    def postprocess_theta(self, theta):
        # remove the softmax shift gauge so the stabilization test can settle
        theta = np.array(theta, dtype=float)
        k = self.k_comp
        theta[:k] -= theta[:k].mean()
        return theta

    def stabilization_blocks(self, theta, theta_prev, weights, order_w):
        params = self.params_of(theta)
        prev = self.params_of(theta_prev)
        d_pi, d_mu, d_v = robust_gradient_blocks(params, self.y, weights, order_w)
        return {
            "now": {
                "pi": params.pi,
                "mu": params.mu,
                "sigma": np.array(params.noisy_covariances()),
                "v": params.v,
            },
            "prev": {
                "pi": prev.pi,
                "mu": prev.mu,
                "sigma": np.array(prev.noisy_covariances()),
            },
            "objective": self.robust_objective(theta, weights, order_w),
            "gradients": {"pi": d_pi, "mu": d_mu, "v": d_v},
        }

    def outlier_indices(self):
        if self._outlier_mask is None:
            return None
        return np.flatnonzero(np.asarray(self._outlier_mask, dtype=bool))


# ---------------------------------------------------------------------------
# initialization


def kmeans_pp_centers(y_mat, n_centers, rng):
    """k-means++ seeding: distance-squared-proportional center selection."""
    y_mat = np.atleast_2d(np.asarray(y_mat, dtype=float))
    n = y_mat.shape[0]
    centers = [y_mat[int(rng.integers(n))]]
    for _ in range(1, n_centers):
        d2 = np.min(
            [np.sum((y_mat - c) ** 2, axis=1) for c in centers], axis=0
        )
        total = d2.sum()
        if total <= 0:
            centers.append(y_mat[int(rng.integers(n))])
            continue
        probs = d2 / total
        centers.append(y_mat[int(rng.choice(n, p=probs))])
    return np.array(centers)


def _random_orthonormal(d, r, rng):
    mat = rng.standard_normal((d, r))
    q, _ = np.linalg.qr(mat)
    return q[:, :r]


def initial_params(y_mat, cfg: DgmmConfig, rng, sigma_xi, centers=None):
    """Uniform weights, unit-sphere or k-means++ centers, orthonormal factors."""
    y_mat = np.atleast_2d(np.asarray(y_mat, dtype=float))
    d = y_mat.shape[1]
    k = cfg.n_components
    if centers is None:
        if cfg.init == "kmeanspp":
            centers = kmeans_pp_centers(y_mat, k, rng)
        else:
            centers = rng.standard_normal((k, d))
            centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    v_list = [_random_orthonormal(d, cfg.rank, rng) for _ in range(k)]
    sigma = np.zeros((d, d)) if sigma_xi is None else sigma_xi
    return MixtureParams(np.full(k, 1.0 / k), centers, v_list, sigma)


# ---------------------------------------------------------------------------
# fit entry points


def _run_fit(y_mat, cfg: DgmmConfig, sigma_xi, reweighter, rng=None,
             init: Optional[MixtureParams] = None, outlier_mask=None):
    rng = rng if rng is not None else np.random.default_rng(0)
    model = DgmmModel(y_mat, cfg.n_components, cfg.rank, cfg.n_orders, sigma_xi,
                      outlier_mask=outlier_mask)
    if init is None:
        init = initial_params(y_mat, cfg, rng, model.sigma_xi)
    else:
        init = MixtureParams(init.pi, init.mu, [vj.copy() for vj in init.v],
                             model.sigma_xi)
    theta0 = model.theta_of(init)
    theta_hat, report = fit(model, theta0, cfg.driver(reweighter))
    return model.params_of(theta_hat), report


def robust_fit(y_mat, cfg: DgmmConfig, sigma_xi=None, rng=None, init=None,
               outlier_mask=None):
    """Reweighted noise-aware moment fit (the full estimator)."""
    return _run_fit(y_mat, cfg, sigma_xi, "sgr", rng, init, outlier_mask)


def noise_aware_fit(y_mat, cfg: DgmmConfig, sigma_xi=None, rng=None, init=None):
    """Noise-aware moment fit with frozen uniform observation weights."""
    return _run_fit(y_mat, cfg, sigma_xi, "uniform", rng, init)


def naive_fit(y_mat, cfg: DgmmConfig, rng=None, init=None):
    """Moment fit that ignores the additive noise (and any contamination)."""
    return _run_fit(y_mat, cfg, None, "uniform", rng, init)


# ---------------------------------------------------------------------------
# likelihood baseline


def em_fit(y_mat, n_components, init_centers=None, rng=None, max_iter=500,
           tol=1e-8, reg=1e-6):
    """Full-covariance Gaussian mixture EM with k-means++ initialization.

    Covariances are regularized by ``reg * I``; convergence is declared on
    a log-likelihood change below ``tol``.  Returns full-covariance
    mixture parameters (factors are symmetric square roots) and a report
    with the log-likelihood trace.
    """
    y_mat = np.atleast_2d(np.asarray(y_mat, dtype=float))
    n, d = y_mat.shape
    k = int(n_components)
    rng = rng if rng is not None else np.random.default_rng(0)
    centers = (np.asarray(init_centers, dtype=float) if init_centers is not None
               else kmeans_pp_centers(y_mat, k, rng))
    pi = np.full(k, 1.0 / k)
    mu = centers.copy()
    base_cov = np.cov(y_mat.T) + reg * np.eye(d)
    covs = [base_cov.copy() for _ in range(k)]

    def log_gauss(x, mean, cov):
        sign, logdet = np.linalg.slogdet(cov)
        if sign <= 0:
            raise NonFiniteInput("singular covariance in EM")
        diff = x - mean
        sol = np.linalg.solve(cov, diff.T).T
        quad = np.sum(diff * sol, axis=1)
        return -0.5 * (quad + logdet + d * math.log(2 * math.pi))

    prev_ll = -math.inf
    ll_trace = []
    flagged_singular = False
    for _ in range(max_iter):
        log_resp = np.column_stack(
            [math.log(pi[j]) + log_gauss(y_mat, mu[j], covs[j]) for j in range(k)]
        )
        norm = logsumexp(log_resp, axis=1)
        ll = float(norm.sum())
        ll_trace.append(ll)
        resp = np.exp(log_resp - norm[:, None])
        nk = resp.sum(axis=0)
        nk = np.maximum(nk, 1e-12)
        pi = nk / n
        mu = (resp.T @ y_mat) / nk[:, None]
        for j in range(k):
            diff = y_mat - mu[j]
            cov = (resp[:, j][:, None] * diff).T @ diff / nk[j]
            cov = (cov + cov.T) / 2 + reg * np.eye(d)
            if np.linalg.eigvalsh(cov).min() < reg / 2:
                flagged_singular = True
                cov += reg * np.eye(d)
            covs[j] = cov
        if abs(ll - prev_ll) <= tol:
            break
        prev_ll = ll

    factors = []
    for j in range(k):
        vals, vecs = np.linalg.eigh(covs[j])
        vals = np.clip(vals, 0.0, None)
        factors.append(vecs * np.sqrt(vals))
    params = MixtureParams(pi, mu, factors, np.zeros((d, d)))
    report = FitReport()
    report.rows = [
        {"t": 1, "i": i + 1, "objective": -ll, "grad_norm": math.nan,
         "reweighted": 0}
        for i, ll in enumerate(ll_trace)
    ]
    report.stop_reason = "singular_component" if flagged_singular else "converged"
    report.final_gradient_norm = math.nan
    return params, report


# ---------------------------------------------------------------------------
# error metrics


def mixture_errors(est: MixtureParams, truth: MixtureParams):
    """Permutation-matched relative errors in weights, centers, covariances.

    The matching permutation minimizes the mean relative Frobenius error
    between the signal covariances V V'; noise is excluded from the
    comparison on both sides.
    """
    if est.k != truth.k:
        raise KMismatch(f"component counts differ: {est.k} vs {truth.k}")
    k = est.k
    est_cov = est.signal_covariances()
    true_cov = truth.signal_covariances()

    best_perm, best_score = None, math.inf
    for perm in itertools.permutations(range(k)):
        score = sum(
            np.linalg.norm(est_cov[j] - true_cov[perm[j]], "fro")
            / np.linalg.norm(true_cov[perm[j]], "fro")
            for j in range(k)
        ) / k
        if score < best_score:
            best_score, best_perm = score, perm

    err_pi = sum(
        abs(est.pi[j] - truth.pi[best_perm[j]]) / abs(truth.pi[best_perm[j]])
        for j in range(k)
    ) / k
    err_mu = sum(
        np.linalg.norm(est.mu[j] - truth.mu[best_perm[j]])
        / np.linalg.norm(truth.mu[best_perm[j]])
        for j in range(k)
    ) / k
    return {
        "err_pi": float(err_pi),
        "err_mu": float(err_mu),
        "err_sigma": float(best_score),
        "permutation": best_perm,
    }

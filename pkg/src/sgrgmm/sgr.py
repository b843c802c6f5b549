"""Spectral gradient reweighting.

Given a cloud of per-observation gradients, an alternating game between a
weight player on the capped simplex and a density-matrix player on the
spectraplex produces outlier-resistant weights: the matrix player chases
directions of large weighted second moment about a fixed center, the
weight player multiplicatively downweights observations that score high in
those directions.  An outer loop moves the center to the current weighted
mean and repeats until the spectral certificate (the operator norm of the
averaged gain matrix) falls below a stopping threshold or the iteration
reaches a fixed point.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    BadEpsilon,
    DimMismatch,
    EmptyCloud,
    NonFiniteInput,
    StepSizeOutOfRange,
)
from .specmat import DensityMatrix, op_norm, symmetrize
from .weights import (
    WeightVector,
    _kl_project_array,
    cap_for,
    geometric_median,
    outlier_mass,
    uniform,
)

__all__ = [
    "GradientCloud",
    "SgrConfig",
    "SgrReport",
    "normalizing_scale",
    "mw_loss",
    "gain_matrix",
    "weighted_mean",
    "weighted_covariance",
    "run_mw_mmw",
    "run_sgr",
    "theory_constants",
]

_EXACT_SCAN_LIMIT = 5000
_FIXED_POINT_TOL = 1e-7


@dataclass
class GradientCloud:
    """N gradient vectors in R^p with optional ground-truth outlier flags.

    The flags are diagnostics only; no algorithm reads them.
    """

    vectors: np.ndarray
    outlier_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=float))
        if self.vectors.size == 0:
            raise EmptyCloud("gradient cloud is empty")
        if not np.all(np.isfinite(self.vectors)):
            raise NonFiniteInput("gradient cloud contains non-finite entries")
        if self.outlier_mask is not None:
            self.outlier_mask = np.asarray(self.outlier_mask, dtype=bool)
            if self.outlier_mask.shape != (self.vectors.shape[0],):
                raise DimMismatch("outlier mask must flag exactly the N points")

    @property
    def n(self):
        return self.vectors.shape[0]

    @property
    def dim(self):
        return self.vectors.shape[1]

    def outlier_indices(self):
        if self.outlier_mask is None:
            return None
        return np.flatnonzero(self.outlier_mask)


@dataclass
class SgrConfig:
    """Hyperparameters for the reweighting primitive.

    ``eta_w`` / ``eta_rho`` default to the regret-optimal schedule
    sqrt(log(1/(1-eps))/T)/nu and sqrt(log p / T)/nu, which requires
    T >= 4 * max(log(1/(1-eps)), log p).  ``c_stop=None`` selects a plug-in
    threshold of 1.2x the operator norm of the covariance of the
    lowest-scoring (1-eps)N observations, estimated once at the first outer
    iteration.  ``c_stop=0`` disables the certificate stop so the outer
    loop runs to a fixed point or ``s_max``.
    """

    epsilon: float
    inner_rounds: int = 64
    eta_w: Optional[float] = None
    eta_rho: Optional[float] = None
    eta_w_scale: Optional[float] = None
    eta_rho_scale: Optional[float] = None
    c_stop: Optional[float] = None
    s_max: int = 30
    restart: str = "warm_start"
    center: Optional[np.ndarray] = None

    def __post_init__(self):
        if not (0.0 <= self.epsilon < 1.0 / 3.0):
            raise BadEpsilon(
                f"epsilon must lie in [0, 1/3), got {self.epsilon!r}"
            )
        if self.restart not in ("warm_start", "uniform"):
            raise ValueError(f"unknown restart policy {self.restart!r}")
        if self.inner_rounds < 1:
            raise ValueError("inner_rounds must be >= 1")
        if self.s_max < 1:
            raise ValueError("s_max must be >= 1")


@dataclass
class SgrReport:
    """Per-outer-iteration history of one reweighting run."""

    spectral_norm: list = field(default_factory=list)
    centers: list = field(default_factory=list)
    weight_l1_change: list = field(default_factory=list)
    center_l2_change: list = field(default_factory=list)
    mean_error: list = field(default_factory=list)
    outlier_mass: list = field(default_factory=list)
    terminated_at: Optional[int] = None
    stop_reason: str = "max_iterations"
    nu: float = 0.0
    nu_exact: bool = True
    c_stop: float = 0.0

    @property
    def iterations(self):
        return len(self.spectral_norm)

    def to_csv(self, path):
        """One row per outer iteration with the standard column set."""
        import csv

        fields = [
            "s", "gamma", "mean_error", "outlier_mass",
            "weight_l1_change", "center_l2_change", "stop_reason",
        ]
        with open(path, "w", newline="") as handle:
            writer = csv.DictWriter(handle, fieldnames=fields)
            writer.writeheader()
            writer.writerows(self.rows())
        return path

    def rows(self):
        """One dict per outer iteration, CSV-ready."""
        out = []
        for s in range(self.iterations):
            out.append(
                {
                    "s": s + 1,
                    "gamma": self.spectral_norm[s],
                    "mean_error": self.mean_error[s] if self.mean_error else "",
                    "outlier_mass": self.outlier_mass[s] if self.outlier_mass else "",
                    "weight_l1_change": self.weight_l1_change[s],
                    "center_l2_change": self.center_l2_change[s],
                    "stop_reason": self.stop_reason
                    if s == self.iterations - 1
                    else "",
                }
            )
        return out


def normalizing_scale(cloud) -> float:
    """Squared diameter of the cloud, max_ij ||g_i - g_j||^2.

    Exact O(N^2) scan up to N = 5000; beyond that the upper bound
    (2 * max_n ||g_n - centroid||)^2 is used (flagged in run reports).
    """
    pts = cloud.vectors if isinstance(cloud, GradientCloud) else np.atleast_2d(cloud)
    if pts.size == 0:
        raise EmptyCloud("empty cloud has no scale")
    n = pts.shape[0]
    if n == 1:
        return 0.0
    if n <= _EXACT_SCAN_LIMIT:
        sq = np.sum(pts * pts, axis=1)
        d2 = sq[:, None] + sq[None, :] - 2.0 * (pts @ pts.T)
        return float(max(d2.max(), 0.0))
    center = pts.mean(axis=0)
    r = np.linalg.norm(pts - center, axis=1).max()
    return float((2.0 * r) ** 2)


def _scale_is_exact(n):
    return n <= _EXACT_SCAN_LIMIT


def mw_loss(z, rho) -> float:
    """Contamination score z' rho z of a centered gradient z."""
    z = np.asarray(z, dtype=float)
    mat = rho.matrix if isinstance(rho, DensityMatrix) else np.asarray(rho)
    if mat.shape[0] != z.size:
        raise DimMismatch(f"score dim {mat.shape[0]} vs vector dim {z.size}")
    return float(z @ mat @ z)


def gain_matrix(cloud, w, center):
    """Fixed-center weighted second moment sum_n w_n (g_n - mu)(g_n - mu)'."""
    pts = cloud.vectors if isinstance(cloud, GradientCloud) else np.atleast_2d(cloud)
    values = w.values if isinstance(w, WeightVector) else np.asarray(w, dtype=float)
    center = np.asarray(center, dtype=float)
    if pts.shape[1] != center.size:
        raise DimMismatch("center dimension does not match the cloud")
    if pts.shape[0] != values.size:
        raise DimMismatch("weight count does not match the cloud")
    z = pts - center
    return symmetrize((values[:, None] * z).T @ z)


def weighted_mean(cloud, w):
    pts = cloud.vectors if isinstance(cloud, GradientCloud) else np.atleast_2d(cloud)
    values = w.values if isinstance(w, WeightVector) else np.asarray(w, dtype=float)
    return pts.T @ values


def weighted_covariance(cloud, w):
    """Weighted second moment about the weighted mean itself."""
    return gain_matrix(cloud, w, weighted_mean(cloud, w))


def _resolve_steps(cfg: SgrConfig, nu: float, p: int):
    """Step sizes for the game, validated against 0 < eta*nu <= 1/2.

    Resolution order per player: an absolute eta wins, then a
    scale-relative eta (eta = scale / nu, the scale in (0, 1/2]), then the
    regret-optimal default.  eta_w = 0 is admissible only at epsilon = 0,
    where the feasible set is the singleton uniform vector and the weight
    player cannot move.
    """
    t = cfg.inner_rounds
    log_cap = math.log(1.0 / (1.0 - cfg.epsilon))
    log_p = math.log(max(p, 2))
    scale = max(nu, 1e-300)
    auto = (cfg.eta_w is None and cfg.eta_w_scale is None) or (
        cfg.eta_rho is None and cfg.eta_rho_scale is None
    )
    if auto and t < 4.0 * max(log_cap, log_p):
        raise StepSizeOutOfRange(
            f"auto step sizes need T >= 4*max(log(1/(1-eps)), log p) = "
            f"{4.0 * max(log_cap, log_p):.2f}, got T = {t}"
        )
    if cfg.eta_w is not None:
        eta_w = cfg.eta_w
    elif cfg.eta_w_scale is not None:
        eta_w = cfg.eta_w_scale / scale
    else:
        eta_w = math.sqrt(log_cap / t) / scale
    if cfg.eta_rho is not None:
        eta_rho = cfg.eta_rho
    elif cfg.eta_rho_scale is not None:
        eta_rho = cfg.eta_rho_scale / scale
    else:
        eta_rho = math.sqrt(log_p / t) / scale
    if not (0.0 < eta_rho * nu <= 0.5 or nu == 0.0):
        raise StepSizeOutOfRange(f"eta_rho * nu = {eta_rho * nu!r} outside (0, 1/2]")
    w_scaled = eta_w * nu
    if not (0.0 < w_scaled <= 0.5 or (w_scaled == 0.0 and (cfg.epsilon == 0.0 or nu == 0.0))):
        raise StepSizeOutOfRange(f"eta_w * nu = {w_scaled!r} outside (0, 1/2]")
    return eta_w, eta_rho


def run_mw_mmw(cloud, center, start_w, cfg: SgrConfig, nu: Optional[float] = None):
    """T alternating rounds of the fixed-center game.

    Returns the round-averaged weights, the averaged gain matrix (equal to
    the gain matrix at the averaged weights, asserted), and its operator
    norm (the spectral certificate for this center).
    """
    cloud = cloud if isinstance(cloud, GradientCloud) else GradientCloud(cloud)
    center = np.asarray(center, dtype=float)
    if nu is None:
        nu = normalizing_scale(cloud)
    eta_w, eta_rho = _resolve_steps(cfg, nu, cloud.dim)
    cap = cap_for(cloud.n, cfg.epsilon)

    z = cloud.vectors - center
    w = np.array(
        start_w.values if isinstance(start_w, WeightVector) else start_w, dtype=float
    )
    t_rounds = cfg.inner_rounds
    w_sum = np.zeros_like(w)
    s_sum = np.zeros((cloud.dim, cloud.dim))
    cum_gain = np.zeros((cloud.dim, cloud.dim))
    for _ in range(t_rounds):
        s_t = symmetrize((w[:, None] * z).T @ z)
        w_sum += w
        s_sum += s_t
        cum_gain += s_t
        vals, vecs = np.linalg.eigh(cum_gain)
        spec = np.exp(eta_rho * (vals - vals[-1]))
        rho = (vecs * (spec / spec.sum())) @ vecs.T
        losses = np.sum((z @ rho) * z, axis=1)
        w = _kl_project_array(w * (1.0 - eta_w * losses), cap)

    w_bar = w_sum / t_rounds
    s_bar = s_sum / t_rounds
    check = gain_matrix(cloud, w_bar, center)
    assert np.allclose(s_bar, check, atol=1e-9 * max(1.0, nu), rtol=1e-9), (
        "averaged gain matrix must equal the gain at the averaged weights"
    )
    gamma = op_norm(s_bar)
    return WeightVector(w_bar, cfg.epsilon), s_bar, gamma


def _plug_in_threshold(cloud, w, center, epsilon):
    """Inlier-scale stopping threshold with 20% headroom.

    Operator norm of the (renormalized) weighted covariance of the
    (1-eps)N observations scoring lowest against the current center.
    """
    pts = cloud.vectors
    scores = np.linalg.norm(pts - center, axis=1)
    keep = int(math.ceil((1.0 - epsilon) * cloud.n))
    idx = np.argsort(scores, kind="stable")[:keep]
    sub_w = w[idx]
    sub_w = sub_w / sub_w.sum()
    sub = pts[idx]
    mean = sub.T @ sub_w
    cov = symmetrize(((sub_w[:, None] * (sub - mean)).T) @ (sub - mean))
    return 1.2 * op_norm(cov)


def run_sgr(cloud, cfg: SgrConfig, w0=None, truth_mean=None):
    """Full reweighting run: fixed-center games with center updates.

    ``w0`` warm-starts the weights across calls (used by the estimation
    driver, which reweights repeatedly on evolving gradient clouds).
    ``truth_mean`` enables the mean-error diagnostic column.

    At epsilon = 0 the capped simplex is the single uniform vector, so the
    run returns exactly uniform weights after recording one certificate
    evaluation.
    """
    cloud = cloud if isinstance(cloud, GradientCloud) else GradientCloud(cloud)
    n = cloud.n
    report = SgrReport()
    report.nu = normalizing_scale(cloud)
    report.nu_exact = _scale_is_exact(n)
    out_idx = cloud.outlier_indices()

    if cfg.center is not None:
        center = np.asarray(cfg.center, dtype=float)
    else:
        center = geometric_median(cloud.vectors)

    if cfg.epsilon == 0.0:
        w = uniform(n, 0.0)
        gamma = op_norm(gain_matrix(cloud, w, center))
        mean = weighted_mean(cloud, w)
        report.spectral_norm.append(gamma)
        report.centers.append(center)
        report.weight_l1_change.append(0.0)
        report.center_l2_change.append(0.0)
        if truth_mean is not None:
            report.mean_error.append(float(np.linalg.norm(mean - truth_mean)))
        if out_idx is not None:
            report.outlier_mass.append(outlier_mass(w, out_idx))
        report.terminated_at = 1
        report.stop_reason = "epsilon_zero_singleton"
        report.c_stop = cfg.c_stop if cfg.c_stop is not None else 0.0
        return w, report

    w = np.array(w0.values if isinstance(w0, WeightVector) else w0, dtype=float) \
        if w0 is not None else uniform(n, cfg.epsilon).values

    c_stop = cfg.c_stop
    if c_stop is None:
        c_stop = _plug_in_threshold(cloud, w, center, cfg.epsilon)
    report.c_stop = c_stop

    final = None
    for s in range(1, cfg.s_max + 1):
        start = uniform(n, cfg.epsilon).values if cfg.restart == "uniform" else w
        w_bar, _, gamma = run_mw_mmw(cloud, center, start, cfg, nu=report.nu)
        new_center = weighted_mean(cloud, w_bar)
        w_change = float(np.abs(w_bar.values - w).sum())
        c_change = float(np.linalg.norm(new_center - center))

        report.spectral_norm.append(gamma)
        report.centers.append(center)
        report.weight_l1_change.append(w_change)
        report.center_l2_change.append(c_change)
        if truth_mean is not None:
            report.mean_error.append(float(np.linalg.norm(new_center - truth_mean)))
        if out_idx is not None:
            report.outlier_mass.append(outlier_mass(w_bar, out_idx))

        w = w_bar.values
        final = w_bar
        if gamma <= c_stop:
            report.terminated_at = s
            report.stop_reason = "certificate"
            break
        center = new_center
        if w_change <= _FIXED_POINT_TOL and c_change <= _FIXED_POINT_TOL:
            report.terminated_at = s
            report.stop_reason = "fixed_point"
            break
    else:
        report.terminated_at = None
        report.stop_reason = "max_iterations"
    return final, report


def theory_constants(
    epsilon,
    t_rounds,
    p,
    nu,
    sigma_op,
    delta_mu,
    delta_sigma,
    e1,
    target_radius=None,
):
    """Closed-form constants of the convergence and termination guarantees.

    Returns alpha (the per-iteration contraction factor), delta_T (the
    inner-game optimization floor), R_epsT (the one-step residual), R_inf
    (the limiting radius R_epsT / (1 - alpha)), and, when a target radius
    is supplied, the outer-iteration bound
    1 + ceil(log((e1 - R_inf)+ / (R - R_inf)+) / log(1/alpha)).
    """
    if not (0.0 <= epsilon < 1.0 / 3.0):
        raise BadEpsilon(f"epsilon must lie in [0, 1/3), got {epsilon!r}")
    alpha = math.sqrt(epsilon / (1.0 - 2.0 * epsilon))
    log_cap = math.log(1.0 / (1.0 - epsilon))
    delta_t = 4.0 * nu * (math.sqrt(log_cap / t_rounds) + math.sqrt(math.log(p) / t_rounds))
    r_eps_t = (1.0 + alpha) * delta_mu + alpha * math.sqrt(sigma_op + delta_sigma + delta_t)
    r_inf = r_eps_t / (1.0 - alpha) if alpha < 1.0 else math.inf
    out = {
        "alpha": alpha,
        "delta_T": delta_t,
        "R_epsT": r_eps_t,
        "R_inf": r_inf,
    }
    if target_radius is not None:
        num = max(e1 - r_inf, 0.0)
        den = max(target_radius - r_inf, 0.0)
        if num == 0.0 or e1 <= target_radius:
            out["s_max_bound"] = 1
        elif den == 0.0:
            out["s_max_bound"] = math.inf
        elif alpha == 0.0:
            out["s_max_bound"] = 1
        else:
            out["s_max_bound"] = 1 + math.ceil(
                math.log(num / den) / math.log(1.0 / alpha)
            )
    return out

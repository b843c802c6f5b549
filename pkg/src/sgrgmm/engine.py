"""Generic driver for reweighted moment-matching estimation.

A moment model exposes per-observation gradient clouds, a weighted
objective, its gradient, and data-driven order weights.  The driver
alternates frozen-weight quasi-Newton optimization with reweighting
epochs: on a schedule (a fixed interval, optionally shortened when the
optimizer looks locally stationary) it reruns the spectral reweighting on
the current gradient cloud of every moment order, refreshes the order
weights, and resets the optimizer memory.  Also houses the finite-sample
error-bound calculator and a numerical identification probe.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import BadEpsilon, NonFiniteObjective, NonFiniteProbe, NonpositiveLambda
from .optim import LbfgsState, lbfgs_step, reset_memory, stabilization_test
from .sgr import GradientCloud, SgrConfig, run_sgr, theory_constants
from .specmat import op_norm
from .weights import outlier_mass, uniform

__all__ = [
    "MomentModel",
    "DriverConfig",
    "FitReport",
    "fit",
    "BoundInputs",
    "finite_sample_bound",
    "identification_probe",
]


class MomentModel:
    """Interface the driver consumes.  Subclasses fill in the moment model.

    Required: ``n_orders``, ``n_obs``, ``cloud_dim``, ``gradient_cloud``,
    ``robust_objective``, ``robust_gradient``, ``order_weights``.
    ``stabilization_blocks`` is optional and enables the early-reweighting
    gate; ``outlier_indices`` is optional and enables mass diagnostics.
    """

    n_orders: int = 1

    @property
    def n_obs(self):
        raise NotImplementedError

    def cloud_dim(self):
        raise NotImplementedError

    def gradient_cloud(self, theta, k):
        """(N, p) array of per-observation gradients for moment order k."""
        raise NotImplementedError

    def per_obs_gradient(self, theta, k, n):
        return self.gradient_cloud(theta, k)[n]

    def robust_objective(self, theta, weights, order_w):
        raise NotImplementedError

    def robust_gradient(self, theta, weights, order_w):
        raise NotImplementedError

    def order_weights(self, theta, weights):
        raise NotImplementedError

    def stabilization_blocks(self, theta, theta_prev, weights, order_w):
        return None

    def postprocess_theta(self, theta):
        """Hook for gauge fixes that leave the objective unchanged."""
        return theta

    def outlier_indices(self):
        return None


@dataclass
class DriverConfig:
    """Schedule and reweighting knobs for one fit.

    ``reweighter`` selects the spectral reweighting ("sgr") or frozen
    uniform weights ("uniform", the non-robust baselines).  ``i_min`` must
    not exceed ``i_interval``.
    """

    sgr: SgrConfig
    t_gmm: int = 2
    i_lbfgs: int = 100
    i_interval: int = 10
    i_min: int = 3
    use_stabilization_gate: bool = True
    stabilization_tol: float = 1e-6
    reweighter: str = "sgr"
    grad_tol: float = 1e-8

    def __post_init__(self):
        if self.i_min > self.i_interval:
            raise ValueError("i_min must not exceed i_interval")
        if self.reweighter not in ("sgr", "uniform"):
            raise ValueError(f"unknown reweighter {self.reweighter!r}")


@dataclass
class FitReport:
    """Per-inner-iteration history of one fit."""

    rows: list = field(default_factory=list)
    reweight_epochs: list = field(default_factory=list)
    order_weight_history: list = field(default_factory=list)
    final_gradient_norm: float = math.nan
    stop_reason: str = ""
    theta_hat: Optional[np.ndarray] = None

    def add_row(self, t, i, objective, grad_norm, reweighted, masses):
        row = {
            "t": t,
            "i": i,
            "objective": objective,
            "grad_norm": grad_norm,
            "reweighted": int(reweighted),
        }
        for k, m in enumerate(masses):
            row[f"outlier_mass_{k + 1}"] = m
        self.rows.append(row)

    def summary(self):
        return {
            "iterations": len(self.rows),
            "reweight_epochs": list(self.reweight_epochs),
            "final_objective": self.rows[-1]["objective"] if self.rows else math.nan,
            "final_gradient_norm": self.final_gradient_norm,
            "stop_reason": self.stop_reason,
        }


def _reweight(model, theta, cfg, prev_weights):
    """New per-order weights, warm-started from the previous epoch."""
    weights = []
    reports = []
    for k in range(model.n_orders):
        if cfg.reweighter == "uniform":
            weights.append(uniform(model.n_obs, 0.0))
            reports.append(None)
            continue
        cloud = GradientCloud(
            model.gradient_cloud(theta, k + 1), outlier_mask=None
        )
        w0 = prev_weights[k] if prev_weights is not None else None
        w, rep = run_sgr(cloud, cfg.sgr, w0=w0)
        weights.append(w)
        reports.append(rep)
    return weights, reports


def fit(model: MomentModel, theta0, cfg: DriverConfig):
    """Reweight-then-optimize loop.  Returns (theta_hat, FitReport).

    Weights and order weights stay frozen between reweighting epochs, so
    each inner window minimizes a fixed smooth objective; the quasi-Newton
    memory is reset whenever they change.  A non-finite objective aborts
    the step and rolls back to the last finite iterate.
    """
    theta = np.array(theta0, dtype=float)
    report = FitReport()
    out_idx = model.outlier_indices()

    weights = [uniform(model.n_obs, 0.0) for _ in range(model.n_orders)]
    order_w = model.order_weights(theta, weights)
    report.order_weight_history.append(list(order_w))

    state = LbfgsState()

    def masses():
        if out_idx is None:
            return []
        return [outlier_mass(w, out_idx) for w in weights]

    stop_reason = "max_iterations"
    for t in range(1, cfg.t_gmm + 1):
        i_prev = 0
        force_due = False
        theta_prev = theta.copy()
        reset_memory(state)
        stop_reason = "max_iterations"
        for i in range(1, cfg.i_lbfgs + 1):
            reweighted = False
            due = force_due or i - i_prev >= cfg.i_interval
            force_due = False
            if not due and cfg.use_stabilization_gate and i - i_prev >= cfg.i_min:
                blocks = model.stabilization_blocks(theta, theta_prev, weights, order_w)
                if blocks is not None:
                    verdict = stabilization_test(
                        blocks["now"],
                        blocks["prev"],
                        blocks["objective"],
                        blocks["gradients"],
                        tol=cfg.stabilization_tol,
                    )
                    due = verdict.stabilized
            if due:
                weights, _ = _reweight(model, theta, cfg, weights)
                order_w = model.order_weights(theta, weights)
                report.order_weight_history.append(list(order_w))
                reset_memory(state)
                i_prev = i
                reweighted = True
                report.reweight_epochs.append((t, i))

            def objective(x):
                return model.robust_objective(x, weights, order_w)

            def gradient(x):
                return model.robust_gradient(x, weights, order_w)

            theta_prev = theta.copy()
            theta_next, state, info = lbfgs_step(state, objective, gradient, theta)
            if not np.isfinite(info.objective) or not np.all(np.isfinite(theta_next)):
                raise NonFiniteObjective(
                    f"objective became non-finite at step t={t}, i={i}"
                )
            theta = model.postprocess_theta(theta_next)
            report.add_row(t, i, info.objective, info.gradient_norm, reweighted, masses())
            if info.status == "line_search_failed":
                reset_memory(state)
                stop_reason = "line_search_failed"
                break
            if info.gradient_norm <= cfg.grad_tol:
                # a stationary window counts as locally stabilized: refresh
                # the weights once and continue rather than leaving them stale
                if cfg.use_stabilization_gate and i - i_prev >= cfg.i_min:
                    force_due = True
                    continue
                stop_reason = "gradient_tolerance"
                break

    report.stop_reason = stop_reason
    report.final_gradient_norm = float(
        np.linalg.norm(model.robust_gradient(theta, weights, order_w))
    )
    report.theta_hat = theta.copy()
    return theta, report


@dataclass
class BoundInputs:
    """Inputs to the local finite-sample parameter error bound.

    Per order k supply either a certificate level ``c_k`` directly or the
    components of the composite level: ``sigma_sup_k`` (largest gradient
    covariance operator norm over the local ball), ``delta_sigma_k``,
    ``r_k`` (outer-loop convergence radius) and ``delta_t_k`` (inner-game
    optimization floor).
    """

    lambda_star: float
    a_k: list
    delta_mu_k: list
    epsilon: float
    delta_opt: float = 0.0
    c_k: Optional[list] = None
    sigma_sup_k: Optional[list] = None
    delta_sigma_k: Optional[list] = None
    r_k: Optional[list] = None
    delta_t_k: Optional[list] = None


def finite_sample_bound(b: BoundInputs) -> float:
    """(2 / lambda*) * (sum_k a_k * (delta_mu_k + alpha * sqrt(C_k)) + delta_opt)."""
    if b.lambda_star <= 0:
        raise NonpositiveLambda(f"lambda_star must be > 0, got {b.lambda_star!r}")
    if not (0.0 <= b.epsilon < 1.0 / 3.0):
        raise BadEpsilon(f"epsilon must lie in [0, 1/3), got {b.epsilon!r}")
    alpha = math.sqrt(b.epsilon / (1.0 - 2.0 * b.epsilon))
    n_orders = len(b.a_k)
    if b.c_k is not None:
        c_levels = list(b.c_k)
    else:
        c_levels = [
            b.sigma_sup_k[k]
            + b.delta_sigma_k[k]
            + (b.delta_mu_k[k] + b.r_k[k]) ** 2
            + b.delta_t_k[k]
            for k in range(n_orders)
        ]
    total = sum(
        b.a_k[k] * (b.delta_mu_k[k] + alpha * math.sqrt(c_levels[k]))
        for k in range(n_orders)
    )
    return (2.0 / b.lambda_star) * (total + b.delta_opt)


def identification_probe(
    moment_map,
    theta,
    weighting,
    r0=0.1,
    fd_step=1e-6,
    n_directions=8,
    rng=None,
):
    """Numerical check of the local identification conditions.

    Finite-differences the moment map to estimate the Jacobian G, forms
    H = G' W G and returns its smallest eigenvalue, a Lipschitz estimate of
    G over a ball of radius r0, and whether the local-radius inequality
    ||W|| L r0 (1.5 ||G|| + 0.5 L r0) <= lambda_min / 2 holds.
    """
    theta = np.asarray(theta, dtype=float)
    weighting = np.asarray(weighting, dtype=float)
    rng = rng if rng is not None else np.random.default_rng(0)
    if not callable(moment_map):
        moment_map = moment_map.moment_map

    def jacobian(point):
        cols = []
        for j in range(point.size):
            e = np.zeros_like(point)
            e[j] = fd_step
            cols.append((np.asarray(moment_map(point + e)) - np.asarray(moment_map(point - e))) / (2 * fd_step))
        jac = np.column_stack(cols)
        if not np.all(np.isfinite(jac)):
            raise NonFiniteProbe("moment map produced non-finite differences")
        return jac

    g_star = jacobian(theta)
    h_star = g_star.T @ weighting @ g_star
    lambda_hat = float(np.linalg.eigvalsh((h_star + h_star.T) / 2).min())

    lipschitz = 0.0
    for _ in range(n_directions):
        u = rng.standard_normal(theta.size)
        u /= np.linalg.norm(u)
        step = r0 * rng.uniform(0.2, 1.0)
        g_probe = jacobian(theta + step * u)
        diff = g_probe - g_star
        lipschitz = max(lipschitz, float(np.linalg.svd(diff, compute_uv=False)[0]) / step)

    w_norm = op_norm((weighting + weighting.T) / 2)
    g_norm = float(np.linalg.svd(g_star, compute_uv=False)[0])
    lhs = w_norm * lipschitz * r0 * (1.5 * g_norm + 0.5 * lipschitz * r0)
    return {
        "lambda_star_hat": lambda_hat,
        "g_lipschitz_hat": lipschitz,
        "radius_check": bool(lhs <= lambda_hat / 2.0),
        "radius_lhs": lhs,
    }


# re-export for callers that assemble their own bound pipelines
theory_constants = theory_constants

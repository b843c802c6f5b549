"""Limited-memory quasi-Newton minimizer with resettable memory.

Two-loop recursion with strong Wolfe line search, a backtracking fallback,
and a steepest-descent last resort.  The memory is a ring buffer that the
estimation driver empties whenever the objective changes discontinuously
(after a reweighting).  Also houses the scaled-gradient stabilization test
used to gate early reweighting.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DimMismatch

__all__ = [
    "LbfgsState",
    "StepInfo",
    "StabilizationVerdict",
    "lbfgs_step",
    "reset_memory",
    "two_loop_direction",
    "stabilization_test",
]

_CURVATURE_TOL = 1e-12
_WOLFE_C1 = 1e-4
_WOLFE_C2 = 0.9
_MAX_TRIALS = 25


@dataclass
class LbfgsState:
    """Ring buffer of (step, gradient-difference) pairs plus run counters.

    Pairs violating the curvature condition s'y > 1e-12 ||s|| ||y|| are
    skipped on insertion, which keeps the implicit inverse-Hessian estimate
    positive definite.
    """

    memory_size: int = 10
    s_list: list = field(default_factory=list)
    y_list: list = field(default_factory=list)
    iter_count: int = 0
    last_objective: Optional[float] = None
    last_gradient_norm: Optional[float] = None

    def push(self, s, y):
        sy = float(s @ y)
        if sy <= _CURVATURE_TOL * np.linalg.norm(s) * np.linalg.norm(y):
            return False
        self.s_list.append(np.array(s))
        self.y_list.append(np.array(y))
        if len(self.s_list) > self.memory_size:
            self.s_list.pop(0)
            self.y_list.pop(0)
        return True


@dataclass
class StepInfo:
    """Outcome of one quasi-Newton step."""

    status: str  # "ok" or "line_search_failed"
    objective: float
    gradient_norm: float
    step_size: float
    used_fallback: bool = False


@dataclass
class StabilizationVerdict:
    zeta_grad: float
    zeta_param: float
    threshold: float
    stabilized: bool


def reset_memory(state: LbfgsState) -> LbfgsState:
    """Empty the curvature-pair buffer, keeping the iteration counter."""
    state.s_list.clear()
    state.y_list.clear()
    return state


def two_loop_direction(state: LbfgsState, grad):
    """Implicit inverse-Hessian product -H g; -g when the buffer is empty."""
    q = -np.array(grad, dtype=float)
    m = len(state.s_list)
    if m == 0:
        return q
    alphas = np.empty(m)
    rhos = np.empty(m)
    for i in range(m - 1, -1, -1):
        s, y = state.s_list[i], state.y_list[i]
        rhos[i] = 1.0 / float(y @ s)
        alphas[i] = rhos[i] * float(s @ q)
        q -= alphas[i] * y
    s, y = state.s_list[-1], state.y_list[-1]
    q *= float(s @ y) / float(y @ y)
    for i in range(m):
        s, y = state.s_list[i], state.y_list[i]
        beta = rhos[i] * float(y @ q)
        q += (alphas[i] - beta) * s
    return q


def _strong_wolfe(f, g, x, direction, f0, g0, max_trials=_MAX_TRIALS, a_init=1.0):
    """Bracket-and-zoom strong Wolfe search. Returns (alpha, fval) or None."""
    d0 = float(g0 @ direction)
    if d0 >= 0:
        return None

    def phi(a):
        return float(f(x + a * direction))

    def dphi(a):
        return float(g(x + a * direction) @ direction)

    a_prev, f_prev = 0.0, f0
    a_cur = a_init
    trials = 0
    a_hi = f_hi = None
    a_lo, f_lo = 0.0, f0
    bracketed = False
    for _ in range(max_trials):
        f_cur = phi(a_cur)
        trials += 1
        if not np.isfinite(f_cur):
            a_cur = 0.5 * (a_prev + a_cur)
            continue
        if f_cur > f0 + _WOLFE_C1 * a_cur * d0 or (f_cur >= f_prev and trials > 1):
            a_lo, f_lo, a_hi, f_hi = a_prev, f_prev, a_cur, f_cur
            bracketed = True
            break
        d_cur = dphi(a_cur)
        if abs(d_cur) <= -_WOLFE_C2 * d0:
            return a_cur, f_cur
        if d_cur >= 0:
            a_lo, f_lo, a_hi, f_hi = a_cur, f_cur, a_prev, f_prev
            bracketed = True
            break
        a_prev, f_prev = a_cur, f_cur
        a_cur *= 2.0
    if not bracketed:
        return None
    for _ in range(max_trials - trials):
        a_mid = 0.5 * (a_lo + a_hi)
        f_mid = phi(a_mid)
        if f_mid > f0 + _WOLFE_C1 * a_mid * d0 or f_mid >= f_lo:
            a_hi, f_hi = a_mid, f_mid
        else:
            d_mid = dphi(a_mid)
            if abs(d_mid) <= -_WOLFE_C2 * d0:
                return a_mid, f_mid
            if d_mid * (a_hi - a_lo) >= 0:
                a_hi, f_hi = a_lo, f_lo
            a_lo, f_lo = a_mid, f_mid
        if abs(a_hi - a_lo) < 1e-16:
            break
    if f_lo < f0 + _WOLFE_C1 * a_lo * float(d0) and a_lo > 0:
        return a_lo, f_lo
    return None


def _backtrack(f, x, direction, f0, d0, max_trials=_MAX_TRIALS, a_init=1.0):
    a = a_init
    for _ in range(max_trials):
        fa = float(f(x + a * direction))
        if np.isfinite(fa) and fa <= f0 + _WOLFE_C1 * a * d0:
            return a, fa
        a *= 0.5
    return None


def lbfgs_step(state: LbfgsState, objective_fn, gradient_fn, x):
    """One quasi-Newton step from x.

    Tries a strong Wolfe search along the two-loop direction, then plain
    backtracking, then a backtracked steepest-descent step.  A failed
    search is reported through ``StepInfo.status`` so the caller can decide
    whether to reset the memory; nothing is raised.
    """
    x = np.array(x, dtype=float)
    f0 = float(objective_fn(x))
    g0 = np.asarray(gradient_fn(x), dtype=float)
    gnorm = float(np.linalg.norm(g0))
    state.iter_count += 1
    if gnorm == 0.0:
        state.last_objective = f0
        state.last_gradient_norm = 0.0
        return x, state, StepInfo("ok", f0, 0.0, 0.0)

    direction = two_loop_direction(state, g0)
    # without curvature pairs the direction is a raw negative gradient,
    # whose scale says nothing about the local curvature: cap the first
    # trial step so one line search cannot fly across basins
    a_init = 1.0
    if not state.s_list:
        a_init = min(1.0, 1.0 / max(1.0, float(np.linalg.norm(direction))))
    result = _strong_wolfe(objective_fn, gradient_fn, x, direction, f0, g0,
                           a_init=a_init)
    used_fallback = False
    if result is None:
        d0 = float(g0 @ direction)
        if d0 < 0:
            result = _backtrack(objective_fn, x, direction, f0, d0, a_init=a_init)
        if result is None:
            # steepest descent as the last resort after a memory reset
            reset_memory(state)
            direction = -g0
            a_init = min(1.0, 1.0 / max(1.0, float(np.linalg.norm(direction))))
            result = _backtrack(objective_fn, x, direction, f0,
                                float(g0 @ direction), a_init=a_init)
            used_fallback = True
    if result is None:
        state.last_objective = f0
        state.last_gradient_norm = gnorm
        return x, state, StepInfo("line_search_failed", f0, gnorm, 0.0, True)

    alpha, f_new = result
    x_new = x + alpha * direction
    g_new = np.asarray(gradient_fn(x_new), dtype=float)
    state.push(x_new - x, g_new - g0)
    state.last_objective = f_new
    state.last_gradient_norm = float(np.linalg.norm(g_new))
    return x_new, state, StepInfo("ok", f_new, state.last_gradient_norm, alpha, used_fallback)


def stabilization_test(params_now, params_prev, objective, block_gradients, tol=1e-6):
    """Scaled-gradient and scaled-parameter-change stationarity test.

    ``params_now`` / ``params_prev`` are mappings with keys ``pi`` (K,),
    ``mu`` (K, d), ``sigma`` (K, d, d) and optionally ``v`` (K factor
    matrices, used only for gradient scaling).  ``block_gradients`` maps
    ``pi`` -> (K,), ``mu`` -> (K, d), ``v`` -> K matrices.  Both scores are
    compared against 10 * tol^(1/3).
    """
    pi_now = np.asarray(params_now["pi"], dtype=float)
    mu_now = np.asarray(params_now["mu"], dtype=float)
    sigma_now = np.asarray(params_now["sigma"], dtype=float)
    pi_prev = np.asarray(params_prev["pi"], dtype=float)
    mu_prev = np.asarray(params_prev["mu"], dtype=float)
    sigma_prev = np.asarray(params_prev["sigma"], dtype=float)
    if pi_now.shape != pi_prev.shape or mu_now.shape != mu_prev.shape:
        raise DimMismatch("parameter blocks disagree between iterates")

    g_pi = np.asarray(block_gradients["pi"], dtype=float)
    g_mu = np.asarray(block_gradients["mu"], dtype=float)
    g_v = block_gradients.get("v")

    k = pi_now.size
    func_scale = max(1.0, abs(float(objective)))
    terms = [float(np.max(np.abs(g_pi)))]
    for j in range(k):
        scale = max(1.0, float(np.linalg.norm(mu_now[j])))
        terms.append(scale * float(np.linalg.norm(g_mu[j])))
    if g_v is not None:
        v_now = params_now.get("v")
        for j in range(k):
            scale = max(1.0, float(np.linalg.norm(v_now[j]))) if v_now is not None else 1.0
            terms.append(scale * float(np.linalg.norm(g_v[j])))
    zeta_grad = max(terms) / func_scale

    changes = [float(np.abs(pi_now - pi_prev).sum())]
    for j in range(k):
        changes.append(
            float(np.linalg.norm(mu_now[j] - mu_prev[j]))
            / max(1.0, float(np.linalg.norm(mu_now[j])))
        )
    for j in range(k):
        changes.append(
            float(np.linalg.norm(sigma_now[j] - sigma_prev[j]))
            / max(1.0, float(np.linalg.norm(sigma_now[j])))
        )
    zeta_param = max(changes)

    threshold = 10.0 * tol ** (1.0 / 3.0)
    return StabilizationVerdict(
        zeta_grad=zeta_grad,
        zeta_param=zeta_param,
        threshold=threshold,
        stabilized=(zeta_grad <= threshold and zeta_param <= threshold),
    )

"""The capped probability simplex, its KL projection, and the geometric median.

The feasible set for the reweighting primitive is the simplex with every
coordinate capped at 1 / ((1 - epsilon) * N).  For epsilon = 0 the cap is
1/N and the set degenerates to the single uniform vector, which lets clean
runs reduce exactly to unweighted estimation.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import AllZero, BadEpsilon, EmptyInput, IndexOutOfRange, Infeasible

__all__ = [
    "WeightVector",
    "cap_for",
    "uniform",
    "kl_project",
    "geometric_median",
    "outlier_mass",
]

_SUM_TOL = 1e-9
_CAP_TOL = 1e-12


def cap_for(n: int, epsilon: float) -> float:
    """Per-coordinate cap 1 / ((1 - epsilon) * N)."""
    return 1.0 / ((1.0 - epsilon) * n)


def _check_epsilon(epsilon):
    if not (0.0 <= epsilon < 1.0 / 3.0):
        raise BadEpsilon(f"epsilon must lie in [0, 1/3), got {epsilon!r}")


@dataclass
class WeightVector:
    """A point on the capped simplex.

    Invariants: entries sum to 1 within 1e-9, and every entry lies in
    [0, cap + 1e-12] with cap = 1 / ((1 - epsilon) * N).
    """

    values: np.ndarray
    epsilon: float
    cap: float = field(init=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.cap = cap_for(self.values.size, self.epsilon)
        self.validate()

    @property
    def n(self):
        return self.values.size

    def validate(self):
        total = self.values.sum()
        if abs(total - 1.0) > _SUM_TOL:
            raise Infeasible(f"weights sum to {total!r}, not 1")
        if self.values.min() < -_CAP_TOL:
            raise Infeasible("negative weight entry")
        if self.values.max() > self.cap + _CAP_TOL:
            raise Infeasible(
                f"weight {self.values.max()!r} exceeds cap {self.cap!r}"
            )
        return self


def uniform(n: int, epsilon: float) -> WeightVector:
    """The uniform weight vector (1/N, ..., 1/N) on the capped simplex."""
    if n < 1:
        raise EmptyInput("need at least one observation")
    _check_epsilon(epsilon)
    return WeightVector(np.full(n, 1.0 / n), epsilon)


def _kl_project_array(raw, cap):
    """Exact KL projection of raw/||raw||_1 onto the cap-constrained simplex.

    Iterative cap-and-renormalize: clamp entries above the cap, rescale the
    free entries proportionally to absorb the remaining mass.  The capped
    set only ever grows, so this finishes in at most N passes and is the
    exact Bregman (relative-entropy) projection.
    """
    raw = np.asarray(raw, dtype=float)
    n = raw.size
    if np.any(raw < 0):
        raise AllZero("raw weights must be nonnegative")
    total = raw.sum()
    if total <= 0:
        raise AllZero("all raw weights are zero")
    if n * cap < 1.0 - _CAP_TOL:
        raise Infeasible(f"cap {cap!r} too small for {n} coordinates")

    w = raw / total
    capped = np.zeros(n, dtype=bool)
    for _ in range(n):
        over = (w > cap) & ~capped
        if not over.any():
            break
        capped |= over
        free = ~capped
        free_mass = 1.0 - cap * capped.sum()
        w = np.where(capped, cap, 0.0)
        if not free.any() or free_mass <= 1e-15:
            # cap budget exactly consumed: free coordinates carry nothing
            break
        free_raw = raw[free].sum()
        if free_raw > 0:
            w[free] = raw[free] * (free_mass / free_raw)
        else:
            # zero-mass free coordinates must absorb the remainder evenly
            w[free] = free_mass / free.sum()
    return w


def kl_project(raw, epsilon: float) -> WeightVector:
    """Project nonnegative raw weights onto the capped simplex in KL geometry.

    Minimizes RE(w || raw / ||raw||_1) over the capped simplex.  Idempotent
    on feasible inputs.
    """
    _check_epsilon(epsilon)
    raw = np.asarray(raw, dtype=float)
    cap = cap_for(raw.size, epsilon)
    return WeightVector(_kl_project_array(raw, cap), epsilon)


def geometric_median(points, tol: float = 1e-9, max_iter: int = 1000):
    """Geometric median by Weiszfeld iteration.

    Stops when the iterate moves less than ``tol`` or after ``max_iter``
    passes.  When an iterate lands on a data point (within 1e-12) that
    point's reciprocal-distance weight is capped at 1e12, the standard tie
    rule that avoids division by zero.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.size == 0:
        raise EmptyInput("no points given")
    if pts.shape[0] == 1:
        return pts[0].copy()
    x = pts.mean(axis=0)
    for _ in range(max_iter):
        dists = np.linalg.norm(pts - x, axis=1)
        inv = np.where(dists > 1e-12, 1.0 / np.maximum(dists, 1e-12), 1e12)
        x_next = (inv[:, None] * pts).sum(axis=0) / inv.sum()
        if np.linalg.norm(x_next - x) <= tol:
            return x_next
        x = x_next
    return x


def outlier_mass(w, outlier_indices) -> float:
    """Total weight carried by the given outlier index set."""
    values = w.values if isinstance(w, WeightVector) else np.asarray(w, dtype=float)
    idx = np.asarray(list(outlier_indices), dtype=int)
    if idx.size == 0:
        return 0.0
    if idx.min() < 0 or idx.max() >= values.size:
        raise IndexOutOfRange(
            f"indices must lie in [0, {values.size}), got range "
            f"[{idx.min()}, {idx.max()}]"
        )
    return float(values[idx].sum())

"""Seeded synthetic data: gradient clouds, noisy low-rank mixtures, adversaries.

All generation is a pure function of (spec, seed).  Substreams derive from
(seed, trial, stream) through a seed sequence, so trials are independent
and reproducible bit-for-bit across runs and platforms.
"""

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dgmm import MixtureParams
from .sgr import GradientCloud

__all__ = [
    "CloudSpec",
    "MixtureSpec",
    "rng_contract",
    "make_cloud",
    "make_mixture_data",
    "export_cloud_csv",
    "export_mixture_csv",
]

# substream purposes; values are arbitrary but frozen for reproducibility
STREAM_DATA = 0
STREAM_INIT = 1
STREAM_ALGO = 2


def rng_contract(seed, *ids):
    """Deterministic generator for (seed, trial, stream, ...) tuples.

    Identical arguments reproduce identical bits on every platform; any
    distinct tuple yields a statistically independent stream.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, ids)]))


@dataclass
class CloudSpec:
    """Synthetic contaminated gradient cloud.

    Inliers are Gaussian with an exponentially decaying diagonal
    covariance (top eigenvalue 1); outliers sit at distance ``strength``
    along the smallest-eigenvalue direction with isotropic spread.
    """

    n: int = 600
    dim: int = 10
    epsilon: float = 0.10
    strength: float = 8.0
    spread: float = 0.1
    seed: int = 0
    inlier_mean: Optional[np.ndarray] = None
    inlier_cov_diag: Optional[np.ndarray] = None

    def __post_init__(self):
        if not (0.0 <= self.epsilon <= 0.45):
            raise ValueError("cloud contamination must lie in [0, 0.45]")
        if self.inlier_mean is None:
            mean = np.zeros(self.dim)
            head = [0.50, -0.50, 0.25, 0.0, 0.75]
            mean[: min(5, self.dim)] = head[: min(5, self.dim)]
            self.inlier_mean = mean
        else:
            self.inlier_mean = np.asarray(self.inlier_mean, dtype=float)
        if self.inlier_cov_diag is None:
            t = 2.0 * np.arange(self.dim) / 9.0
            self.inlier_cov_diag = np.exp(-t)
        else:
            self.inlier_cov_diag = np.asarray(self.inlier_cov_diag, dtype=float)


def _min_eig_direction(cov_diag):
    """Unit eigenvector of the smallest eigenvalue, first nonzero entry > 0."""
    cov = np.diag(cov_diag)
    vals, vecs = np.linalg.eigh(cov)
    v = vecs[:, 0]
    nz = np.flatnonzero(np.abs(v) > 1e-12)
    if v[nz[0]] < 0:
        v = -v
    return v


def make_cloud(spec: CloudSpec, rng=None) -> GradientCloud:
    """Labeled contaminated cloud: floor(eps * N) points replaced."""
    rng = rng if rng is not None else rng_contract(spec.seed, 0, STREAM_DATA)
    cov_diag = spec.inlier_cov_diag
    pts = spec.inlier_mean + rng.standard_normal((spec.n, spec.dim)) * np.sqrt(cov_diag)
    n_out = int(np.floor(spec.epsilon * spec.n))
    mask = np.zeros(spec.n, dtype=bool)
    if n_out > 0:
        idx = rng.choice(spec.n, size=n_out, replace=False)
        v_min = _min_eig_direction(cov_diag)
        center = spec.inlier_mean + spec.strength * v_min
        pts[idx] = center + rng.standard_normal((n_out, spec.dim)) * np.sqrt(spec.spread)
        mask[idx] = True
    return GradientCloud(pts, outlier_mask=mask)


@dataclass
class MixtureSpec:
    """Noisy low-rank mixture sample with an optional adversary.

    ``contamination`` is one of None, "gaussian" (isotropic replacement
    draws with standard deviation ``outlier_std``) or "box" (uniform over
    [box_low, box_high]^d plus jitter with standard deviation
    ``box_jitter``).
    """

    d: int = 5
    k: int = 2
    n: int = 1000
    rank: int = 2
    center_radius: float = 5.0
    cov_singular_range: tuple = (1.0, 2.0)
    noise_level: float = 0.10
    noise_on: bool = True
    contamination: Optional[str] = "gaussian"
    epsilon: float = 0.10
    outlier_std: float = 4.0
    box_low: float = 4.0
    box_high: float = 10.0
    box_jitter: float = 0.1
    seed: int = 0

    def sigma_xi(self):
        if not self.noise_on:
            return np.zeros((self.d, self.d))
        return self.noise_level * np.eye(self.d)


def _random_truth(spec: MixtureSpec, rng) -> MixtureParams:
    centers = rng.standard_normal((spec.k, spec.d))
    centers *= spec.center_radius / np.linalg.norm(centers, axis=1, keepdims=True)
    v_list = []
    lo, hi = spec.cov_singular_range
    for _ in range(spec.k):
        basis, _ = np.linalg.qr(rng.standard_normal((spec.d, spec.rank)))
        sing = rng.uniform(lo, hi, size=spec.rank)
        v_list.append(basis * np.sqrt(sing))
    return MixtureParams(
        np.full(spec.k, 1.0 / spec.k), centers, v_list, spec.sigma_xi()
    )


def make_mixture_data(spec: MixtureSpec, rng=None):
    """(observations, truth, outlier_mask, component_labels)."""
    rng = rng if rng is not None else rng_contract(spec.seed, 0, STREAM_DATA)
    truth = _random_truth(spec, rng)
    comp = rng.choice(spec.k, size=spec.n, p=truth.pi)
    obs = np.empty((spec.n, spec.d))
    for j in range(spec.k):
        rows = np.flatnonzero(comp == j)
        latent = rng.standard_normal((rows.size, spec.rank))
        obs[rows] = truth.mu[j] + latent @ truth.v[j].T
    if spec.noise_on:
        obs += rng.standard_normal((spec.n, spec.d)) * np.sqrt(spec.noise_level)

    mask = np.zeros(spec.n, dtype=bool)
    n_out = int(np.floor(spec.epsilon * spec.n)) if spec.contamination else 0
    if n_out > 0:
        idx = rng.choice(spec.n, size=n_out, replace=False)
        if spec.contamination == "gaussian":
            obs[idx] = rng.standard_normal((n_out, spec.d)) * spec.outlier_std
        elif spec.contamination == "box":
            obs[idx] = rng.uniform(spec.box_low, spec.box_high, size=(n_out, spec.d))
            obs[idx] += rng.standard_normal((n_out, spec.d)) * spec.box_jitter
        else:
            raise ValueError(f"unknown adversary {spec.contamination!r}")
        mask[idx] = True
    return obs, truth, mask, comp


def export_cloud_csv(cloud: GradientCloud, path):
    """One row per observation, coordinates then an outlier label column."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow([f"g{i}" for i in range(cloud.dim)] + ["is_outlier"])
        mask = (
            cloud.outlier_mask
            if cloud.outlier_mask is not None
            else np.zeros(cloud.n, dtype=bool)
        )
        for row, flag in zip(cloud.vectors, mask):
            writer.writerow([repr(float(x)) for x in row] + [int(flag)])


def export_mixture_csv(obs, mask, comp, path):
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            [f"y{i}" for i in range(obs.shape[1])] + ["is_outlier", "component"]
        )
        for row, flag, label in zip(obs, mask, comp):
            writer.writerow([repr(float(x)) for x in row] + [int(flag), int(label)])

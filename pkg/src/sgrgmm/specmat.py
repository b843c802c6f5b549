"""Dense symmetric-matrix primitives.

Eigendecomposition, operator norm, trace inner product, and
entropy-regularized Gibbs states.  Everything here is a pure function of
its inputs, so concurrent use on shared immutable arrays is safe.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DimMismatch, NonFiniteInput

__all__ = [
    "EigenPair",
    "DensityMatrix",
    "symmetrize",
    "sym_eigen",
    "op_norm",
    "trace_inner",
    "gibbs_state",
    "von_neumann_entropy",
]


def symmetrize(a):
    """Return the exactly symmetric part (a + a.T) / 2 as a new array."""
    a = np.asarray(a, dtype=float)
    return (a + a.T) / 2.0


def _check_square_finite(a, name="matrix"):
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimMismatch(f"{name} must be square, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NonFiniteInput(f"{name} contains non-finite entries")
    return a


@dataclass
class EigenPair:
    """Full spectral decomposition, eigenvalues sorted descending.

    ``vectors[:, i]`` is the unit eigenvector for ``values[i]``.
    """

    values: np.ndarray
    vectors: np.ndarray

    def reconstruct(self):
        return (self.vectors * self.values) @ self.vectors.T


@dataclass
class DensityMatrix:
    """Symmetric PSD matrix with unit trace (a mixed spectral state).

    Invariants: symmetric, eigenvalues >= -1e-10, trace within 1e-10 of 1.
    """

    matrix: np.ndarray

    @property
    def dim(self):
        return self.matrix.shape[0]

    @staticmethod
    def from_spectrum(values, vectors):
        """Build from a known spectrum, repairing tiny negative drift.

        Eigenvalues in (-1e-10, 0) are clipped to zero and the spectrum is
        renormalized to unit trace; anything more negative is a genuine
        PSD violation and raises.
        """
        values = np.asarray(values, dtype=float)
        if values.min() < -1e-10:
            raise NonFiniteInput(
                f"spectrum has eigenvalue {values.min():.3e} below PSD tolerance"
            )
        values = np.clip(values, 0.0, None)
        total = values.sum()
        if total <= 0:
            raise NonFiniteInput("spectrum has zero total mass")
        values = values / total
        mat = symmetrize((vectors * values) @ vectors.T)
        return DensityMatrix(mat)

    def validate(self, trace_tol=1e-10, eig_tol=1e-10):
        mat = self.matrix
        if not np.allclose(mat, mat.T, atol=1e-12, rtol=0):
            raise NonFiniteInput("density matrix is not symmetric")
        if abs(np.trace(mat) - 1.0) > trace_tol:
            raise NonFiniteInput(f"density matrix trace {np.trace(mat)!r} != 1")
        if np.linalg.eigvalsh(mat).min() < -eig_tol:
            raise NonFiniteInput("density matrix has a negative eigenvalue")
        return self


def sym_eigen(a) -> EigenPair:
    """Full eigendecomposition of a symmetric matrix, values descending.

    Deterministic for identical input bits (LAPACK ``syevd`` via
    ``numpy.linalg.eigh``).
    """
    a = _check_square_finite(a)
    vals, vecs = np.linalg.eigh(symmetrize(a))
    order = np.arange(vals.size - 1, -1, -1)
    return EigenPair(values=vals[order], vectors=vecs[:, order])


def op_norm(a) -> float:
    """Largest absolute eigenvalue, computed through ``sym_eigen``."""
    pair = sym_eigen(a)
    return float(max(abs(pair.values[0]), abs(pair.values[-1])))


def trace_inner(a, b) -> float:
    """Trace inner product <A, B> = sum_ij A_ij B_ij for symmetric A, B."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DimMismatch(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.sum(a * b))


def gibbs_state(h, eta) -> DensityMatrix:
    """exp(eta * h) / Tr[exp(eta * h)] for symmetric h and eta > 0.

    The top eigenvalue is subtracted before exponentiation: cumulative
    gain matrices grow linearly with the round count and overflow a naive
    matrix exponential.
    """
    h = _check_square_finite(h, "gibbs input")
    if not eta > 0:
        raise NonFiniteInput(f"eta must be positive, got {eta!r}")
    pair = sym_eigen(h)
    shifted = eta * (pair.values - pair.values[0])
    weights = np.exp(shifted)
    return DensityMatrix.from_spectrum(weights, pair.vectors)


def von_neumann_entropy(rho: DensityMatrix) -> float:
    """-Tr[rho log rho] from the eigenvalues, with 0 log 0 = 0."""
    vals = np.linalg.eigvalsh(rho.matrix)
    vals = np.clip(vals, 0.0, None)
    pos = vals[vals > 0]
    return float(-np.sum(pos * np.log(pos)))
